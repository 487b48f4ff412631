"""Config-driven experiment orchestration.

An experiment config is a JSON document with a strict schema: unknown keys
are errors, every referenced path must exist at load, and all validation
failures are reported in one exhaustive list before any compute starts.
Every artifact a run emits embeds the resolved config and seeds.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attack import AttackConfig, Perturbation, baseline_attack, run_attack
from .data import gen_dataset, load_manifest, load_split
from .defense import DefenseConfig, DefenseRuntime, calibrate_caps
from .io import load_checkpoint, save_checkpoint, save_perturbation, load_perturbation
from .metrics import MetricsReport, evaluate_set, write_rows_csv
from .model import ModelConfig, init_weights
from .sparsifiers import MECHANISM_KINDS, make_mechanism
from .train import TrainConfig, train_victim


class ValidationError(ValueError):
    """Carries the full list of config problems."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid experiment config:\n" + "\n".join(f"  - {e}" for e in self.errors))


_MODEL_KEYS = {
    "depth": int, "embed_dim": int, "heads": int, "image_size": int,
    "patch_size": int, "num_classes": int, "channels": int, "mlp_ratio": int,
    "layernorm_eps": float, "sparsifier_start_block": (int, type(None)),
}
_DATASET_KEYS = {"dir": str, "classes": int, "per_class": int, "seed": int}
_TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "lr": float, "seed": int, "grad_clip": float,
    "gate_budget_patch": float, "gate_budget_head": float, "gate_budget_comp": float,
    "gate_reg_weight": float, "halt_target_mean": float, "halt_reg_weight": float,
    "ats_entropy_weight": float, "max_clean_tur": float,
}
_MECH_KEYS = {
    "ats": {"start_block": int, "sample_count": (int, type(None))},
    "adavit": {"start_block": int, "temperature": float},
    "avit": {"start_block": int, "tau": float},
}
_ATTACK_KEYS = {
    "name": str, "variant": str, "mechanisms": list, "epsilon": float,
    "iterations": int, "lam": float, "seed": int, "batch_size": int,
    "universal_steps": int, "step_init": (float, type(None)), "patch_size": int,
    "patch_pos": list, "patch_step_init": float, "random_init": bool,
    "target_class": (int, type(None)),
}
_EVAL_KEYS = {"test_images": (int, type(None)), "batch_size": int}
_DEFENSE_KEYS = {"policy": str, "seed": int}
_BASELINES = ("random", "standard_pgd", "sponge")
_VARIANTS = ("single", "class_universal", "universal", "universal_patch")

_TOP_KEYS = ("model", "dataset", "mechanisms", "train", "evaluation",
             "baselines", "attacks", "defense", "seeds", "output_dir")


def _check_section(errors, section, allowed, prefix):
    if not isinstance(section, dict):
        errors.append(f"{prefix}: expected an object")
        return
    for key, val in section.items():
        if key not in allowed:
            errors.append(f"{prefix}.{key}: unknown key")
            continue
        want = allowed[key]
        if isinstance(want, tuple):
            ok = isinstance(val, want) and not isinstance(val, bool)
        elif want is float:
            ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        elif want is int:
            ok = isinstance(val, int) and not isinstance(val, bool)
        else:
            ok = isinstance(val, want)
        if not ok:
            errors.append(f"{prefix}.{key}: expected {getattr(want, '__name__', want)}, got {type(val).__name__}")


def validate_config(raw, base_dir=".", require_dataset=True):
    """Validate a raw config dict; returns the dict or raises with the
    exhaustive error list."""
    errors = []
    if not isinstance(raw, dict):
        raise ValidationError(["config root must be a JSON object"])
    for key in raw:
        if key not in _TOP_KEYS:
            errors.append(f"{key}: unknown top-level key")
    if "output_dir" not in raw:
        errors.append("output_dir: required")
    if "dataset" not in raw:
        errors.append("dataset: required")
    else:
        _check_section(errors, raw["dataset"], _DATASET_KEYS, "dataset")
        if isinstance(raw["dataset"], dict):
            if "dir" not in raw["dataset"]:
                errors.append("dataset.dir: required")
            elif require_dataset:
                droot = Path(base_dir) / raw["dataset"]["dir"]
                if not (droot / "manifest.csv").exists():
                    errors.append(f"dataset.dir: no manifest at {droot / 'manifest.csv'}")
    if "model" in raw:
        _check_section(errors, raw["model"], _MODEL_KEYS, "model")
    if "train" in raw:
        _check_section(errors, raw["train"], _TRAIN_KEYS, "train")
    if "evaluation" in raw:
        _check_section(errors, raw["evaluation"], _EVAL_KEYS, "evaluation")
    if "mechanisms" in raw:
        if not isinstance(raw["mechanisms"], dict):
            errors.append("mechanisms: expected an object")
        else:
            for kind, sub in raw["mechanisms"].items():
                if kind not in MECHANISM_KINDS:
                    errors.append(f"mechanisms.{kind}: unknown mechanism")
                elif sub is not None:
                    _check_section(errors, sub, _MECH_KEYS[kind], f"mechanisms.{kind}")
    if "baselines" in raw:
        if not isinstance(raw["baselines"], list):
            errors.append("baselines: expected a list")
        else:
            for b in raw["baselines"]:
                if b not in _BASELINES:
                    errors.append(f"baselines: unknown baseline '{b}'")
    if "attacks" in raw:
        if not isinstance(raw["attacks"], list):
            errors.append("attacks: expected a list")
        else:
            names = set()
            for i, atk in enumerate(raw["attacks"]):
                _check_section(errors, atk, _ATTACK_KEYS, f"attacks[{i}]")
                if isinstance(atk, dict):
                    if "name" not in atk:
                        errors.append(f"attacks[{i}].name: required")
                    elif atk["name"] in names:
                        errors.append(f"attacks[{i}].name: duplicate '{atk['name']}'")
                    else:
                        names.add(atk["name"])
                    if atk.get("variant") not in _VARIANTS:
                        errors.append(f"attacks[{i}].variant: must be one of {_VARIANTS}")
                    mechs = atk.get("mechanisms", [])
                    if not mechs:
                        errors.append(f"attacks[{i}].mechanisms: required, non-empty")
                    for m in mechs:
                        if m not in MECHANISM_KINDS:
                            errors.append(f"attacks[{i}].mechanisms: unknown '{m}'")
                    if atk.get("variant") == "class_universal" and atk.get("target_class") is None:
                        errors.append(f"attacks[{i}].target_class: required for class_universal")
    if "defense" in raw and raw["defense"] is not None:
        _check_section(errors, raw["defense"], _DEFENSE_KEYS, "defense")
        if isinstance(raw["defense"], dict) and raw["defense"].get("policy") not in ("random", "confidence", None):
            errors.append("defense.policy: must be 'random' or 'confidence'")
    if "seeds" in raw:
        if (not isinstance(raw["seeds"], list) or not raw["seeds"]
                or not all(isinstance(s, int) and not isinstance(s, bool) for s in raw["seeds"])):
            errors.append("seeds: expected a non-empty list of integers")
    if errors:
        raise ValidationError(errors)
    return raw


def load_config(path, require_dataset=True):
    path = Path(path)
    if not path.exists():
        raise ValidationError([f"config file not found: {path}"])
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError([f"config is not valid JSON: {e}"]) from None
    return validate_config(raw, base_dir=path.parent, require_dataset=require_dataset)


DEFAULT_EVAL = {"test_images": 200, "batch_size": 64}


class ExperimentRunner:
    """Executes the phases of one experiment config."""

    def __init__(self, raw_config, base_dir="."):
        self.raw = raw_config
        self.base = Path(base_dir)
        self.out = self.base / raw_config["output_dir"]
        self.model_config = ModelConfig(**raw_config.get("model", {}))
        self.seeds = raw_config.get("seeds", [0])
        self.eval_cfg = {**DEFAULT_EVAL, **raw_config.get("evaluation", {})}
        self.mechanisms = raw_config.get("mechanisms", {"ats": None, "adavit": None, "avit": None})
        self.out.mkdir(parents=True, exist_ok=True)
        self._dump_resolved()

    def _dump_resolved(self):
        resolved = dict(self.raw)
        resolved["model"] = self.model_config.to_dict()
        resolved["seeds"] = list(self.seeds)
        resolved["evaluation"] = dict(self.eval_cfg)
        with open(self.out / "resolved_config.json", "w") as fh:
            json.dump(resolved, fh, indent=2, sort_keys=True)
        self.resolved = resolved

    # ----- dataset ---------------------------------------------------------

    def dataset_dir(self):
        return self.base / self.raw["dataset"]["dir"]

    def generate_dataset(self, seed=None):
        ds = self.raw["dataset"]
        return gen_dataset(
            self.dataset_dir(),
            classes=ds.get("classes", 10),
            per_class=ds.get("per_class", 200),
            image_size=self.model_config.image_size,
            seed=ds.get("seed", 0) if seed is None else seed,
        )

    def manifest(self):
        return load_manifest(self.dataset_dir())

    # ----- victims ---------------------------------------------------------

    def victim_path(self, kind):
        return self.out / "victims" / f"{kind}.ckpt"

    def train_victims(self):
        man = self.manifest()
        xtr, ytr, _ = load_split(man, "train")
        xte, yte, _ = load_split(man, "test")
        (self.out / "victims").mkdir(exist_ok=True)
        tcfg = TrainConfig(**self.raw.get("train", {}))
        logs = {}
        for kind, mcfg in self.mechanisms.items():
            hyper = dict(mcfg or {})
            mech_config = None
            if hyper:
                from .sparsifiers import AtsConfig, GatingConfig, HaltingConfig
                mech_config = {"ats": AtsConfig, "adavit": GatingConfig, "avit": HaltingConfig}[kind](**hyper)
                if kind == "adavit":
                    mech_config.straight_through = True
                    mech_config.stochastic = True
            weights, mechanism, log = train_victim(
                kind, self.model_config, xtr, ytr, tcfg,
                mechanism_config=mech_config, eval_images=xte, eval_labels=yte)
            save_checkpoint(self.victim_path(kind), weights, kind=kind,
                            extra={"mechanism": hyper, "train": tcfg.to_dict(),
                                   "seeds": list(self.seeds)})
            with open(self.out / "victims" / f"{kind}_train_log.json", "w") as fh:
                json.dump({"config": self.resolved, "log": log}, fh, indent=2)
            logs[kind] = log
        return logs

    def load_victims(self):
        victims = {}
        for kind, mcfg in self.mechanisms.items():
            path = self.victim_path(kind)
            if not path.exists():
                raise FileNotFoundError(f"victim checkpoint missing: {path} (run the train phase)")
            weights, _, _ = load_checkpoint(path)
            victims[kind] = (weights, make_mechanism(kind, weights.config, **(mcfg or {})))
        return victims

    # ----- evaluation helpers ---------------------------------------------

    def test_set(self):
        man = self.manifest()
        return load_split(man, "test", limit=self.eval_cfg.get("test_images"))

    def holdout_set(self):
        man = self.manifest()
        return load_split(man, "holdout")

    def _emit(self, seed_dir, mech, name, report, clean=None, upper=None, extra=None):
        d = seed_dir / mech
        d.mkdir(parents=True, exist_ok=True)
        payload = report.summary(clean, upper)
        payload["config"] = {"seeds": list(self.seeds)}
        if extra:
            payload.update(extra)
        with open(d / f"{name}.summary.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        return report

    def evaluate_baselines(self, seed):
        """Clean, vanilla upper bound, and configured reference perturbations."""
        victims = self.load_victims()
        x, y, ids = self.test_set()
        seed_dir = self.out / f"seed_{seed}"
        results = {}
        for kind, (weights, mechanism) in victims.items():
            clean = evaluate_set(weights, mechanism, x, y, ids, variant="clean",
                                 batch_size=self.eval_cfg["batch_size"])
            upper = evaluate_set(weights, None, x, y, ids, variant="clean_wo",
                                 batch_size=self.eval_cfg["batch_size"])
            self._emit(seed_dir, kind, "clean", clean)
            self._emit(seed_dir, kind, "clean_wo", upper, clean, upper)
            reports = [clean, upper]
            clean_preds = np.array([r.pred for r in clean.rows])
            for base in self.raw.get("baselines", []):
                bc = AttackConfig(mechanisms=(kind,), seed=seed,
                                  iterations=50 if base != "random" else 0)
                perts = baseline_attack(base, bc, x, y, victims, ids)
                rep = evaluate_set(weights, mechanism, x, y, ids, perturbation=perts,
                                   clean_preds=clean_preds, variant=base,
                                   batch_size=self.eval_cfg["batch_size"])
                reports.append(self._emit(seed_dir, kind, base, rep, clean, upper))
            write_rows_csv(seed_dir / kind / "baseline_rows.csv", reports)
            results[kind] = reports
        return results

    def run_attacks(self, seed, names=None):
        victims = self.load_victims()
        x, y, ids = self.test_set()
        man = self.manifest()
        seed_dir = self.out / f"seed_{seed}"
        all_results = {}
        for spec in self.raw.get("attacks", []):
            if names and spec["name"] not in names:
                continue
            cfg_kw = {k: v for k, v in spec.items() if k != "name"}
            cfg_kw["seed"] = seed
            if "patch_pos" in cfg_kw:
                cfg_kw["patch_pos"] = tuple(cfg_kw["patch_pos"])
            cfg_kw["mechanisms"] = tuple(cfg_kw["mechanisms"])
            acfg = AttackConfig(**cfg_kw)
            if acfg.variant in ("universal", "class_universal", "universal_patch"):
                xtr, ytr, idtr = load_split(man, "train")
                perts = run_attack(acfg, xtr, ytr, victims, idtr)
            else:
                perts = run_attack(acfg, x, y, victims, ids)
            pert_dir = seed_dir / "perturbations" / spec["name"]
            pert_dir.mkdir(parents=True, exist_ok=True)
            if None in perts:
                save_perturbation(pert_dir / "shared.pert", perts[None])
            else:
                for img_id, p in perts.items():
                    save_perturbation(pert_dir / f"img_{img_id:05d}.pert", p)
            eval_pert = perts if None not in perts else perts[None]
            for kind in acfg.mechanisms if len(acfg.mechanisms) == 1 else victims:
                weights, mechanism = victims[kind]
                clean = evaluate_set(weights, mechanism, x, y, ids, variant="clean",
                                     batch_size=self.eval_cfg["batch_size"])
                upper = evaluate_set(weights, None, x, y, ids, variant="clean_wo",
                                     batch_size=self.eval_cfg["batch_size"])
                ex, ey, eids = x, y, ids
                if acfg.variant == "class_universal":
                    sel = y == acfg.target_class
                    ex, ey, eids = x[sel], y[sel], ids[sel]
                    clean = evaluate_set(weights, mechanism, ex, ey, eids, variant="clean",
                                         batch_size=self.eval_cfg["batch_size"])
                rep = evaluate_set(weights, mechanism, ex, ey, eids, perturbation=eval_pert,
                                   variant=spec["name"], batch_size=self.eval_cfg["batch_size"])
                self._emit(seed_dir, kind, spec["name"], rep, clean, upper,
                           extra={"attack": cfg_kw})
                write_rows_csv(seed_dir / kind / f"{spec['name']}_rows.csv", [rep])
                all_results[(spec["name"], kind)] = rep
        return all_results

    def run_defense(self, seed, attack_names=None):
        """Calibrate per-mechanism caps on the holdout, then evaluate
        defended clean and defended-adversarial behavior."""
        dcfg_raw = self.raw.get("defense") or {}
        victims = self.load_victims()
        hx, _, _ = self.holdout_set()
        x, y, ids = self.test_set()
        seed_dir = self.out / f"seed_{seed}"
        results = {}
        for kind, (weights, mechanism) in victims.items():
            dconf = calibrate_caps(weights, mechanism, hx,
                                   policy=dcfg_raw.get("policy", "confidence"),
                                   seed=dcfg_raw.get("seed", seed))
            runtime = DefenseRuntime(dconf)
            clean = evaluate_set(weights, mechanism, x, y, ids, variant="clean",
                                 batch_size=self.eval_cfg["batch_size"])
            defended_clean = evaluate_set(weights, mechanism, x, y, ids, defense=runtime,
                                          variant="defended_clean",
                                          batch_size=self.eval_cfg["batch_size"])
            reports = [self._emit(seed_dir, kind, "defended_clean", defended_clean, clean)]
            for spec in self.raw.get("attacks", []):
                if attack_names and spec["name"] not in attack_names:
                    continue
                if kind not in spec["mechanisms"]:
                    continue
                pert_dir = seed_dir / "perturbations" / spec["name"]
                if not pert_dir.exists():
                    continue
                shared = pert_dir / "shared.pert"
                if shared.exists():
                    pert = load_perturbation(shared)
                else:
                    pert = {}
                    for f in pert_dir.glob("img_*.pert"):
                        p = load_perturbation(f)
                        pert[p.image_id] = p
                rep = evaluate_set(weights, mechanism, x, y, ids, perturbation=pert,
                                   defense=runtime, variant=f"defended_{spec['name']}",
                                   batch_size=self.eval_cfg["batch_size"])
                reports.append(self._emit(seed_dir, kind, f"defended_{spec['name']}", rep, clean))
            d = seed_dir / kind
            with open(d / "defense.json", "w") as fh:
                json.dump({"config": dconf.to_dict(), "seeds": list(self.seeds)}, fh, indent=2)
            write_rows_csv(d / "defended_rows.csv", reports)
            results[kind] = (dconf, reports)
        return results

    # ----- report ----------------------------------------------------------

    def report(self):
        """Aggregate every emitted summary into one bundle; never mutates
        experiment data, safe to re-run."""
        bundle = {"config": self.resolved, "seeds": list(self.seeds), "runs": {}}
        for seed in self.seeds:
            seed_dir = self.out / f"seed_{seed}"
            if not seed_dir.exists():
                continue
            per_seed = {}
            for mech_dir in sorted(p for p in seed_dir.iterdir() if p.is_dir() and p.name in MECHANISM_KINDS):
                rows = {}
                for f in sorted(mech_dir.glob("*.summary.json")):
                    with open(f) as fh:
                        rows[f.stem.replace(".summary", "")] = json.load(fh)
                per_seed[mech_dir.name] = rows
            bundle["runs"][str(seed)] = per_seed
        # multi-seed means
        means = {}
        for seed, per_seed in bundle["runs"].items():
            for mech, rows in per_seed.items():
                for name, payload in rows.items():
                    key = (mech, name)
                    means.setdefault(key, []).append(payload)
        bundle["averaged"] = {
            f"{mech}/{name}": {
                "mean_tur": float(np.mean([p["mean_tur"] for p in ps])),
                "mean_flops": float(np.mean([p["mean_flops"] for p in ps])),
                "accuracy": float(np.mean([p["accuracy"] for p in ps])),
                "preservation_rate": float(np.mean([p["preservation_rate"] for p in ps])),
                "per_seed_tur": [p["mean_tur"] for p in ps],
            }
            for (mech, name), ps in sorted(means.items())
        }
        with open(self.out / "report.json", "w") as fh:
            json.dump(bundle, fh, indent=2, sort_keys=True)
        return bundle

    def run(self):
        """Full matrix: baselines, attacks, defense, report, per seed."""
        for seed in self.seeds:
            self.evaluate_baselines(seed)
            self.run_attacks(seed)
            if self.raw.get("defense") is not None:
                self.run_defense(seed)
        return self.report()


def run_experiment(raw_config, base_dir="."):
    return ExperimentRunner(raw_config, base_dir).run()
