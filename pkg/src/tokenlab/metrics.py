"""Efficiency and fidelity accounting: token utilization, analytic compute
cost, accuracy, prediction preservation, per-block histograms.

The compute model counts multiply-accumulates per the convention that
quotes the standard small vision transformer at 4.6 G for a full forward
(the reference figure the reproduction test pins). Layernorm/softmax costs
are excluded (sub-percent at these dims).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelConfig, ModelWeights, RunContext, model_forward


def compute_tur(trace):
    """Token utilization ratio per image: active token slots over all
    blocks divided by depth * seq_len. Blocks a mechanism never touches
    count every token active."""
    counts = trace.active_counts  # (L, B)
    tur = counts.sum(axis=0) / float(trace.depth * trace.seq_len)
    return tur


def block_flops(config: ModelConfig, tokens, head_frac=1.0, msa_on=1.0, ffn_on=1.0):
    """Cost of one block at ``tokens`` active rows.

    MSA: 4*n*d^2 projections + 2*n^2*d attention, scaled by the active-head
    fraction and zero when the MSA is off; FFN: 8*n*d^2 when on.
    """
    d = config.embed_dim
    n = np.asarray(tokens, dtype=np.float64)
    msa = (4.0 * n * d * d + 2.0 * n * n * d) * head_frac * msa_on
    ffn = (2.0 * config.mlp_ratio * n * d * d) * ffn_on
    return msa + ffn


def stem_flops(config: ModelConfig):
    """Patch embedding plus classification head cost (token-count independent)."""
    embed = config.num_patches * config.patch_dim * config.embed_dim
    head = config.embed_dim * config.num_classes
    return float(embed + head)


def compute_flops(config: ModelConfig, active_counts, head_frac=None, msa_on=None, ffn_on=None):
    """Analytic cost of one forward pass given per-block active token counts.

    ``active_counts`` has length depth; optional per-block head fractions
    and component flags refine the estimate. The vanilla model passes all
    tokens with everything on.
    """
    counts = np.asarray(active_counts, dtype=np.float64)
    if counts.shape[0] != config.depth:
        raise ValueError(f"expected {config.depth} per-block counts, got {counts.shape[0]}")
    ones = np.ones(config.depth)
    hf = ones if head_frac is None else np.asarray(head_frac, dtype=np.float64)
    mo = ones if msa_on is None else np.asarray(msa_on, dtype=np.float64)
    fo = ones if ffn_on is None else np.asarray(ffn_on, dtype=np.float64)
    total = stem_flops(config)
    for l in range(config.depth):
        total += block_flops(config, counts[l], hf[l], mo[l], fo[l])
    return float(total)


def vanilla_flops(config: ModelConfig):
    return compute_flops(config, np.full(config.depth, config.seq_len))


def trace_flops(config: ModelConfig, trace):
    """(B,) analytic cost per image from a forward trace."""
    counts = trace.active_counts.astype(np.float64)      # (L, B)
    per_block = block_flops(config, counts, trace.head_frac, trace.msa_on, trace.ffn_on)
    return per_block.sum(axis=0) + stem_flops(config)


@dataclass
class ImageResult:
    image_id: int
    label: int
    clean_pred: int
    pred: int
    tur: float
    flops: float
    per_block_active: np.ndarray
    per_token_depth: np.ndarray


@dataclass
class MetricsReport:
    mechanism: str
    variant: str
    n_images: int
    tur: float
    flops: float
    accuracy: float
    preservation_rate: float
    per_block_active: np.ndarray
    rows: list = field(default_factory=list)

    def summary(self, clean=None, upper=None):
        """JSON-ready summary; deltas and percent-of-upper-bound figures are
        filled in when the clean baseline / vanilla upper bound are given."""
        out = {
            "mechanism": self.mechanism,
            "variant": self.variant,
            "n_images": self.n_images,
            "mean_tur": round(self.tur, 6),
            "mean_flops": self.flops,
            "accuracy": round(self.accuracy, 6),
            "preservation_rate": round(self.preservation_rate, 6),
            "per_block_active_mean": [round(float(v), 3) for v in self.per_block_active],
        }
        if clean is not None:
            out["delta_vs_clean"] = {
                "tur": round(self.tur - clean.tur, 6),
                "flops": self.flops - clean.flops,
            }
            if upper is not None:
                span_t = max(upper.tur - clean.tur, 1e-12)
                span_f = max(upper.flops - clean.flops, 1e-12)
                out["pct_of_upper_bound"] = {
                    "tur": round(100.0 * (self.tur - clean.tur) / span_t, 2),
                    "flops": round(100.0 * (self.flops - clean.flops) / span_f, 2),
                }
        return out


def write_rows_csv(path, reports):
    """One CSV row per evaluated image across the given reports."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "variant", "mechanism", "tur", "flops", "clean_pred", "adv_pred"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([r.image_id, rep.variant, rep.mechanism,
                            f"{r.tur:.6f}", f"{r.flops:.0f}", r.clean_pred, r.pred])


def _apply_perturbation(x, ids, perturbation):
    if perturbation is None:
        return x
    if isinstance(perturbation, dict):
        out = x.copy()
        for i, img_id in enumerate(ids):
            out[i] = perturbation[int(img_id)].apply(out[i])
        return out
    return perturbation.apply(x)


def evaluate_set(weights: ModelWeights, mechanism, images, labels, ids=None,
                 perturbation=None, defense=None, batch_size=64,
                 clean_preds=None, variant=None):
    """Aggregate TUR / FLOPs / accuracy / preservation over an image set.

    ``perturbation`` may be a single reusable perturbation or a dict of
    per-image ones; with none given the report is the clean baseline and
    prediction preservation is 1 by definition.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("empty evaluation set")
    if ids is None:
        ids = np.arange(images.shape[0])
    cfg = weights.config
    need_clean = perturbation is not None and clean_preds is None
    rows = []
    preds = np.zeros(len(images), dtype=np.int64)
    clean_out = np.zeros(len(images), dtype=np.int64) if need_clean else None
    turs = np.zeros(len(images))
    flops = np.zeros(len(images))
    ctx = RunContext(mode="eval")
    for s in range(0, len(images), batch_size):
        sl = slice(s, min(s + batch_size, len(images)))
        x = images[sl]
        bid = ids[sl]
        if need_clean:
            lg, _ = model_forward(x, weights, mechanism, ctx=ctx)
            clean_out[sl] = np.argmax(lg.data, axis=-1)
        xa = _apply_perturbation(x, bid, perturbation)
        if defense is not None:
            defense.begin(bid)
        logits, trace = model_forward(xa, weights, mechanism, defense=defense, ctx=ctx)
        preds[sl] = np.argmax(logits.data, axis=-1)
        turs[sl] = compute_tur(trace)
        flops[sl] = trace_flops(cfg, trace)
        for j in range(x.shape[0]):
            gi = s + j
            rows.append(ImageResult(
                image_id=int(bid[j]),
                label=int(labels[gi]),
                clean_pred=-1,
                pred=int(preds[gi]),
                tur=float(turs[gi]),
                flops=float(flops[gi]),
                per_block_active=trace.active_counts[:, j].copy(),
                per_token_depth=trace.per_token_depth(j),
            ))
    if perturbation is None:
        reference = preds
    elif clean_preds is not None:
        reference = np.asarray(clean_preds)
    else:
        reference = clean_out
    for r, cp in zip(rows, reference):
        r.clean_pred = int(cp)
    per_block = np.zeros(cfg.depth)
    for r in rows:
        per_block += r.per_block_active
    return MetricsReport(
        mechanism=mechanism.kind if mechanism is not None else "none",
        variant=variant or ("clean" if perturbation is None else "attacked"),
        n_images=len(images),
        tur=float(turs.mean()),
        flops=float(flops.mean()),
        accuracy=float((preds == labels).mean()),
        preservation_rate=float((preds == reference).mean()),
        per_block_active=per_block / len(images),
        rows=rows,
    )
