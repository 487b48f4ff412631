"""Command-line harness.

Subcommands map one-to-one onto experiment phases:

    gen-data   synthesize the dataset named in the config
    train      train the configured victims (writes checkpoints)
    evaluate   clean / vanilla / reference-perturbation rows
    attack     craft configured perturbations and evaluate them
    defend     calibrate token caps and evaluate the defended model
    report     aggregate all emitted summaries (idempotent)

Exit codes: 0 success, 1 validation error, 2 runtime failure. With
``--json``, errors are emitted machine-readable on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback

from .experiment import ExperimentRunner, ValidationError, load_config


class _CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _CliError(message)


def build_parser():
    p = _Parser(prog="tokenlab", description="Token-sparsification attack laboratory")
    p.add_argument("--json", action="store_true", help="machine-readable errors on stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, needs_seed in (
        ("gen-data", True), ("train", False), ("evaluate", True),
        ("attack", True), ("defend", True), ("report", False),
    ):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--out", default=None, help="override output directory")
        if needs_seed:
            sp.add_argument("--seed", type=int, default=None, help="override run seed")
        if name == "attack":
            sp.add_argument("--name", action="append", default=None,
                            help="run only the named attack (repeatable)")
    return p


def _emit_error(kind, message, details, as_json):
    if as_json:
        sys.stderr.write(json.dumps({"error": kind, "message": message, "details": details}) + "\n")
    else:
        sys.stderr.write(f"error ({kind}): {message}\n")
        for d in details:
            sys.stderr.write(f"  - {d}\n")


def _runner(args):
    raw = load_config(args.config, require_dataset=args.command not in ("gen-data",))
    if args.out:
        raw = dict(raw)
        raw["output_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        raw = dict(raw)
        raw["seeds"] = [args.seed]
    from pathlib import Path
    return ExperimentRunner(raw, base_dir=Path(args.config).parent)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _CliError as e:
        _emit_error("usage", str(e), [], "--json" in (argv or sys.argv))
        return 1
    as_json = args.json
    try:
        runner = _runner(args)
        if args.command == "gen-data":
            man = runner.generate_dataset(seed=getattr(args, "seed", None))
            print(json.dumps({"dataset": str(runner.dataset_dir()), "counts": man.counts()}))
        elif args.command == "train":
            logs = runner.train_victims()
            print(json.dumps({k: v[-1] for k, v in logs.items()}, default=str))
        elif args.command == "evaluate":
            for seed in runner.seeds:
                runner.evaluate_baselines(seed)
            print(json.dumps({"evaluated_seeds": list(runner.seeds)}))
        elif args.command == "attack":
            for seed in runner.seeds:
                runner.run_attacks(seed, names=args.name)
            print(json.dumps({"attacked_seeds": list(runner.seeds)}))
        elif args.command == "defend":
            for seed in runner.seeds:
                runner.run_defense(seed)
            print(json.dumps({"defended_seeds": list(runner.seeds)}))
        elif args.command == "report":
            bundle = runner.report()
            print(json.dumps({"report": str(runner.out / 'report.json'),
                              "entries": len(bundle["averaged"])}))
        return 0
    except ValidationError as e:
        _emit_error("validation", "config rejected", e.errors, as_json)
        return 1
    except FileNotFoundError as e:
        _emit_error("validation", str(e), [], as_json)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        _emit_error("runtime", str(e), traceback.format_exc().splitlines()[-3:], as_json)
        return 2


if __name__ == "__main__":
    sys.exit(main())
