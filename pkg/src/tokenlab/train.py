"""Toy victim training.

The attention-sampling victim is the plain backbone (the mechanism is
parameter-free). The gating and halting victims co-train their mechanism
parameters with a usage-regularization surrogate that pulls mean keep
probability / mean halting score toward a configured budget — enough to
yield non-degenerate, input-dependent sparsification for attack studies,
not a reproduction of the mechanisms' original training recipes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .metrics import compute_tur, evaluate_set
from .model import ModelConfig, ModelWeights, RunContext, init_weights, model_forward
from .sparsifiers import (
    AtsConfig,
    AttentionSampling,
    DecisionGating,
    GatingConfig,
    AdaptiveHalting,
    HaltingConfig,
)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    lr: float = 1.5e-3
    seed: int = 0
    grad_clip: float = 5.0
    # gating victim
    gate_budget_patch: float = 0.55
    gate_budget_head: float = 0.85
    gate_budget_comp: float = 0.95
    gate_reg_weight: float = 2.0
    # halting victim
    halt_target_mean: float = 0.30
    halt_reg_weight: float = 5.0
    # attention-sampling victim: concentration pressure on the significance
    # simplex (entropy minimized); 0 disables and trains a plain backbone
    ats_entropy_weight: float = 0.3
    # sparsity post-condition
    max_clean_tur: float = 0.95

    def to_dict(self):
        return dict(self.__dict__)


class Adam:
    """Standard Adam on the raw parameter arrays."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def cross_entropy(logits, labels):
    """Mean cross-entropy of logits (B, M) against integer labels."""
    b, m = logits.shape
    onehot = np.zeros((b, m), dtype=logits.dtype)
    onehot[np.arange(b), np.asarray(labels)] = 1.0
    logq = T.log_softmax(logits, axis=-1)
    return T.scale(T.reduce_sum(T.mul(Tensor(onehot), logq)), -1.0 / b)


def _mean_over_blocks(tensors):
    total = None
    for t in tensors:
        m = T.reduce_mean(t)
        total = m if total is None else T.add(total, m)
    return T.scale(total, 1.0 / len(tensors))


def _gating_reg(state, cfg: TrainConfig):
    reg_p = T.square(T.sub(_mean_over_blocks(state.patch_soft), cfg.gate_budget_patch))
    reg_h = T.square(T.sub(_mean_over_blocks(state.head_soft), cfg.gate_budget_head))
    reg_b = T.square(T.sub(_mean_over_blocks(state.comp_soft), cfg.gate_budget_comp))
    return T.add(T.add(reg_p, reg_h), reg_b)


def _halting_reg(state, cfg: TrainConfig):
    return T.square(T.sub(_mean_over_blocks(state.h), cfg.halt_target_mean))


def _significance_entropy(state):
    """Mean entropy of the significance simplex across attachment blocks;
    minimizing it concentrates scores onto few tokens."""
    total = None
    for s in state.scores:
        ent = T.scale(T.reduce_mean(T.reduce_sum(T.xlogx(s), axis=-1)), -1.0)
        total = ent if total is None else T.add(total, ent)
    return T.scale(total, 1.0 / len(state.scores))


def train_victim(kind, model_config: ModelConfig, train_images, train_labels,
                 config: TrainConfig | None = None, mechanism_config=None,
                 eval_images=None, eval_labels=None, strict=True):
    """Train one victim; returns (weights, mechanism, log).

    ``kind``: "backbone" (plain classifier, also the attention-sampling
    victim), "adavit", or "avit". Raises :class:`TrainingError` on
    divergence, and — when strict — if the trained victim fails to
    actually sparsify (clean TUR at or above the configured bound).
    """
    cfg = config or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    if kind == "backbone":
        weights = init_weights(model_config, seed=cfg.seed)
        mechanism = None
    elif kind == "ats":
        # parameter-free mechanism; attach it during training so the
        # backbone adapts to sampled inference, with optional pressure to
        # concentrate significance scores (otherwise toy-scale attention
        # stays too diffuse to sparsify anything)
        weights = init_weights(model_config, seed=cfg.seed)
        mechanism = AttentionSampling(model_config, mechanism_config)
    elif kind == "adavit":
        weights = init_weights(model_config, seed=cfg.seed, with_gating=True)
        mechanism = DecisionGating(
            model_config,
            mechanism_config or GatingConfig(straight_through=True, stochastic=True),
        )
    elif kind == "avit":
        weights = init_weights(model_config, seed=cfg.seed, with_halting=True)
        mechanism = AdaptiveHalting(model_config, mechanism_config)
    else:
        raise ValueError(f"unknown victim kind '{kind}'")

    x = np.asarray(train_images, dtype=np.float32)
    y = np.asarray(train_labels)
    n = x.shape[0]
    weights.requires_grad_(True)
    opt = Adam(weights.parameters(), lr=cfg.lr)
    ctx = RunContext(mode="train", rng=rng)
    log = []
    step = 0
    with T.finite_checks(False):
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            ep_loss, ep_hits, seen = 0.0, 0, 0
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                xb, yb = x[idx], y[idx]
                with T.Tape():
                    logits, trace = model_forward(xb, weights, mechanism, ctx=ctx)
                    loss = cross_entropy(logits, yb)
                    if kind == "adavit":
                        loss = T.add(loss, T.scale(_gating_reg(trace.state, cfg), cfg.gate_reg_weight))
                    elif kind == "avit":
                        loss = T.add(loss, T.scale(_halting_reg(trace.state, cfg), cfg.halt_reg_weight))
                    elif kind == "ats" and cfg.ats_entropy_weight > 0 and trace.state.scores:
                        loss = T.add(loss, T.scale(_significance_entropy(trace.state),
                                                   cfg.ats_entropy_weight))
                    lval = loss.item()
                    if not math.isfinite(lval):
                        raise TrainingError(
                            f"divergence at epoch {epoch} step {step}: loss={lval}")
                    T.backward(loss)
                clip_grad_norm(weights.parameters(), cfg.grad_clip)
                opt.step()
                opt.zero_grad()
                ep_loss += lval * len(idx)
                ep_hits += int((np.argmax(logits.data, axis=-1) == yb).sum())
                seen += len(idx)
                step += 1
            log.append({
                "epoch": epoch,
                "loss": ep_loss / seen,
                "train_acc": ep_hits / seen,
            })
    weights.requires_grad_(False)

    eval_mechanism = mechanism
    if kind == "backbone":
        eval_mechanism = AttentionSampling(model_config, mechanism_config)
    elif kind == "adavit":
        # evaluation uses deterministic hard gates, no straight-through
        eval_mechanism = DecisionGating(model_config, GatingConfig(
            start_block=mechanism.config.start_block,
            temperature=mechanism.config.temperature))
    report = None
    if eval_images is not None:
        report = evaluate_set(weights, eval_mechanism, eval_images, eval_labels)
        log.append({
            "eval_acc": report.accuracy,
            "clean_tur": report.tur,
            "mechanism": eval_mechanism.kind,
        })
        if strict and report.tur >= cfg.max_clean_tur:
            raise TrainingError(
                f"victim does not sparsify: clean TUR {report.tur:.3f} >= {cfg.max_clean_tur}")
    return weights, eval_mechanism, log
