"""PGD-based token-exhaustion attack, baselines, and perturbation variants.

The attack crafts an input perturbation that drives a sparsification
mechanism toward worst-case token usage while a weighted
classification-preservation term keeps the victim's original prediction.
Losses are phrased as distances to the worst case and minimized, so the
update descends the gradient: delta <- project(delta - alpha * sign(grad)).
Projection clamps delta into the epsilon ball, then pixel validity of
x + delta is restored by adjusting delta.

Variants: per-image ("single"), one perturbation for a class
("class_universal"), one for the whole set ("universal"), and an
unbounded pasted patch ("universal_patch"). With several mechanisms
configured, each iteration trains against one picked uniformly at random
(seeded) — the ensemble strategy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .model import ModelWeights, RunContext, model_forward

VARIANTS = ("single", "class_universal", "universal", "universal_patch")
BASELINES = ("random", "standard_pgd", "sponge")


@dataclass
class AttackConfig:
    epsilon: float = 16.0 / 255.0
    iterations: int = 250
    lam: float = 8e-4              # classification-preservation weight
    variant: str = "single"
    mechanisms: tuple = ("avit",)
    target_class: int | None = None
    seed: int = 0
    batch_size: int = 32
    universal_steps: int = 1500
    step_init: float | None = None  # cosine schedule start; default epsilon/10
    patch_size: int = 8
    patch_pos: tuple = (0, 0)
    patch_step_init: float = 0.1
    random_init: bool = False

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'")
        if isinstance(self.mechanisms, str):
            self.mechanisms = (self.mechanisms,)
        self.mechanisms = tuple(self.mechanisms)
        if self.variant == "class_universal" and self.target_class is None:
            raise ValueError("class_universal needs a target class")

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "iterations": self.iterations,
            "lam": self.lam,
            "variant": self.variant,
            "mechanisms": list(self.mechanisms),
            "target_class": self.target_class,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "universal_steps": self.universal_steps,
            "step_init": self.step_init,
            "patch_size": self.patch_size,
            "patch_pos": list(self.patch_pos),
            "patch_step_init": self.patch_step_init,
            "random_init": self.random_init,
        }


@dataclass
class Perturbation:
    """A crafted delta plus its training metadata."""

    delta: np.ndarray
    variant: str
    epsilon: float
    lam: float
    iterations: int
    seed: int
    mechanisms: tuple
    image_id: int | None = None
    target_class: int | None = None
    patch_pos: tuple | None = None
    curve: list = field(default_factory=list)

    def apply(self, x):
        """x + delta (or patch paste), clipped to pixel validity."""
        x = np.asarray(x)
        if self.variant == "universal_patch":
            out = np.array(x, copy=True)
            r, c = self.patch_pos
            ph, pw = self.delta.shape[-2:]
            out[..., :, r:r + ph, c:c + pw] = self.delta
            return np.clip(out, 0.0, 1.0)
        return np.clip(x + self.delta, 0.0, 1.0).astype(x.dtype)


# ---------------------------------------------------------------------------
# loss components
# ---------------------------------------------------------------------------


def loss_cls(logits_adv, logits_clean):
    """Per-image cross-entropy between the adversarial softmax distribution
    and the frozen clean one, averaged over classes. Differentiable w.r.t.
    the adversarial logits only."""
    clean = np.asarray(logits_clean, dtype=np.float64)
    shifted = clean - clean.max(axis=-1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=-1, keepdims=True)
    m = clean.shape[-1]
    logq = T.log_softmax(logits_adv, axis=-1)
    return T.scale(T.reduce_sum(T.mul(Tensor(p.astype(logits_adv.dtype)), logq), axis=-1), -1.0 / m)


def loss_ats(state):
    """Mean over attachment blocks of KL(scores || uniform); zero iff the
    significance simplex is uniform in every block."""
    if not state.scores:
        raise ValueError("trace carries no significance scores")
    n = state.scores[0].shape[-1]
    logn = math.log(n)
    total = None
    for s in state.scores:
        kl = T.add(T.reduce_sum(T.xlogx(s), axis=-1), T.scale(T.reduce_sum(s, axis=-1), logn))
        total = kl if total is None else T.add(total, kl)
    return T.scale(total, 1.0 / len(state.scores))


def loss_adavit(state):
    """Mean-square gap of the soft keep-probabilities to 1, per block:
    components (2) + heads (gated off when the MSA is off) + patches."""
    if not state.blocks:
        raise ValueError("trace carries no gating decisions")
    total = None
    for soft_p, soft_h, soft_b, hard_b in zip(
            state.patch_soft, state.head_soft, state.comp_soft, state.comp_hard):
        comp = T.reduce_mean(T.square(T.sub(soft_b, 1.0)), axis=-1)
        head = T.reduce_mean(T.square(T.sub(soft_h, 1.0)), axis=-1)
        gate = hard_b[:, 0].astype(soft_h.dtype)  # MSA-on indicator, no gradient
        patch = T.reduce_mean(T.square(T.sub(soft_p, 1.0)), axis=-1)
        block_loss = T.add(T.add(comp, T.mul(head, Tensor(gate))), patch)
        total = block_loss if total is None else T.add(total, block_loss)
    return T.scale(total, 1.0 / len(state.blocks))


def loss_avit(state):
    """Squared cumulative halting scores (target 0), averaged over each
    token's blocks up to and including its halting point, then over tokens."""
    if not state.h:
        raise ValueError("trace carries no halting scores")
    total = None
    cum = None
    for h, blk in zip(state.h, state.h_blocks):
        cum = h if cum is None else T.add(cum, h)
        gate = ((state.halt_block == 0) | (blk <= state.halt_block)).astype(h.dtype)
        term = T.mul(T.square(cum), Tensor(gate))
        total = term if total is None else T.add(total, term)
    per_token = T.scale(total, 1.0 / len(state.h))
    return T.reduce_mean(per_token, axis=-1)


ATTACK_LOSSES = {"ats": loss_ats, "adavit": loss_adavit, "avit": loss_avit}


def compose_adv(x, delta):
    """Graph for x + delta with a straight-through pixel-validity correction.

    ``delta`` may be image-shaped (broadcast over the batch) or per-image.
    """
    x = np.asarray(x)
    if delta.ndim == x.ndim - 1:
        adv = T.add(Tensor(x), T.broadcast_to(T.reshape(delta, (1,) + delta.shape), x.shape))
    else:
        adv = T.add(Tensor(x), delta)
    correction = np.clip(adv.data, 0.0, 1.0) - adv.data
    if np.any(correction != 0.0):
        adv = T.add(adv, Tensor(correction))
    return adv


def loss_total(x, delta, weights: ModelWeights, mechanism, clean_logits, lam,
               ctx: RunContext | None = None):
    """Sparsified forward on x + delta; mechanism attack loss plus
    lam * classification preservation. Returns (scalar total, per-image
    losses, trace)."""
    ctx = ctx or RunContext(mode="attack")
    adv = compose_adv(x, delta)
    logits, trace = model_forward(adv, weights, mechanism, ctx=ctx)
    atk = ATTACK_LOSSES[mechanism.kind](trace.state)
    per = atk if lam == 0 else T.add(atk, T.scale(loss_cls(logits, clean_logits), lam))
    return T.reduce_sum(per), per.data.copy(), trace


# ---------------------------------------------------------------------------
# PGD machinery
# ---------------------------------------------------------------------------


def pgd_step(delta, grad, alpha, epsilon, x=None):
    """One signed descent step with projection: clamp delta into the
    epsilon ball, then (when the anchor image is given) clamp x + delta
    into pixel range by adjusting delta."""
    out = np.clip(delta - alpha * np.sign(grad), -epsilon, epsilon)
    if x is not None:
        out = np.clip(x + out, 0.0, 1.0) - x
    return out.astype(delta.dtype)


def cosine_schedule(step_init, iterations):
    """Cosine annealing from step_init to 0 across the iteration budget."""
    if iterations <= 0:
        return np.zeros(0)
    t = np.arange(iterations)
    return step_init * (1.0 + np.cos(math.pi * t / iterations)) / 2.0


def _clean_logits(x, victims, batch_size=64):
    out = {}
    ctx = RunContext(mode="eval")
    for kind, (weights, mechanism) in victims.items():
        chunks = []
        for s in range(0, x.shape[0], batch_size):
            lg, _ = model_forward(x[s:s + batch_size], weights, mechanism, ctx=ctx)
            chunks.append(lg.data.copy())
        out[kind] = np.concatenate(chunks, axis=0)
    return out


def _pick_mechanism(kinds, rng):
    if len(kinds) == 1:
        return kinds[0]
    return kinds[int(rng.integers(len(kinds)))]


def _craft_batch(x, config: AttackConfig, victims, clean, rng, lam=None):
    """Per-image perturbations for one batch (losses decouple across images,
    so batching reproduces the per-image runs exactly)."""
    lam = config.lam if lam is None else lam
    eps = config.epsilon
    if config.random_init:
        delta = rng.uniform(-eps, eps, size=x.shape).astype(np.float32)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    else:
        delta = np.zeros_like(x, dtype=np.float32)
    alphas = cosine_schedule(config.step_init or eps / 10.0, config.iterations)
    curve = []
    for t in range(config.iterations):
        kind = _pick_mechanism(config.mechanisms, rng)
        weights, mechanism = victims[kind]
        leaf = Tensor(delta, requires_grad=True)
        with T.Tape():
            total, per, _ = loss_total(x, leaf, weights, mechanism, clean[kind], lam)
        T.backward(total)
        delta = pgd_step(delta, leaf.grad, alphas[t], eps, x)
        curve.append(float(per.mean()))
    return delta, curve


def run_attack(config: AttackConfig, images, labels, victims, image_ids=None,
               eval_images=None):
    """Craft perturbation(s) per the configured variant.

    ``victims`` maps mechanism kind -> (weights, mechanism). Returns a dict
    of per-image :class:`Perturbation` for the single variant, otherwise a
    one-element dict {None: Perturbation} holding the shared delta.
    """
    for kind in config.mechanisms:
        if kind not in victims:
            raise ValueError(f"mechanism '{kind}' not among the provided victims")
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if image_ids is None:
        image_ids = np.arange(images.shape[0])
    rng = np.random.default_rng(config.seed)

    if config.variant == "single":
        perts = {}
        for s in range(0, images.shape[0], config.batch_size):
            sl = slice(s, min(s + config.batch_size, images.shape[0]))
            x = images[sl]
            clean = _clean_logits(x, victims)
            delta, curve = _craft_batch(x, config, victims, clean, rng)
            for j, img_id in enumerate(image_ids[sl]):
                perts[int(img_id)] = Perturbation(
                    delta=delta[j], variant="single", epsilon=config.epsilon,
                    lam=config.lam, iterations=config.iterations, seed=config.seed,
                    mechanisms=config.mechanisms, image_id=int(img_id), curve=curve)
        return perts

    if config.variant == "class_universal":
        sel = labels == config.target_class
        if not sel.any():
            raise ValueError(f"no images of class {config.target_class} in the set")
        images = images[sel]
        labels = labels[sel]
    if images.shape[0] == 0:
        raise ValueError("empty attack set")

    if config.variant == "universal_patch":
        pert = _craft_patch(config, images, victims, rng)
    else:
        pert = _craft_universal(config, images, victims, rng)
    return {None: pert}


def _iterate_shuffled(n, batch_size, steps, rng):
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos >= n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos:pos + batch_size]
        pos += batch_size


def _craft_universal(config: AttackConfig, images, victims, rng):
    eps = config.epsilon
    shape = images.shape[1:]
    if config.random_init:
        delta = rng.uniform(-eps, eps, size=shape).astype(np.float32)
    else:
        delta = np.zeros(shape, dtype=np.float32)
    steps = config.universal_steps
    alphas = cosine_schedule(config.step_init or eps / 10.0, steps)
    clean_all = _clean_logits(images, victims)
    curve = []
    for t, idx in enumerate(_iterate_shuffled(images.shape[0], config.batch_size, steps, rng)):
        kind = _pick_mechanism(config.mechanisms, rng)
        weights, mechanism = victims[kind]
        x = images[idx]
        leaf = Tensor(delta, requires_grad=True)
        with T.Tape():
            total, per, _ = loss_total(x, leaf, weights, mechanism, clean_all[kind][idx], config.lam)
        T.backward(total)
        delta = np.clip(delta - alphas[t] * np.sign(leaf.grad), -eps, eps)
        curve.append(float(per.mean()))
    return Perturbation(
        delta=delta, variant=config.variant, epsilon=eps, lam=config.lam,
        iterations=steps, seed=config.seed, mechanisms=config.mechanisms,
        target_class=config.target_class, curve=curve)


def _patch_region_indices(image_shape, patch_pos, patch_size):
    c, hgt, wid = image_shape
    r, cpos = patch_pos
    if r < 0 or cpos < 0 or r + patch_size > hgt or cpos + patch_size > wid:
        raise ValueError("patch exceeds image bounds")
    idx = []
    for ch in range(c):
        for i in range(r, r + patch_size):
            start = ch * hgt * wid + i * wid + cpos
            idx.extend(range(start, start + patch_size))
    return np.asarray(idx, dtype=np.intp)


def _craft_patch(config: AttackConfig, images, victims, rng):
    """Unbounded patch pasted at a fixed position; pixel range is the only
    constraint."""
    c, hgt, wid = images.shape[1:]
    p = config.patch_size
    idx = _patch_region_indices((c, hgt, wid), config.patch_pos, p)
    patch = np.full(c * p * p, 0.5, dtype=np.float32)
    keep_mask = np.ones(c * hgt * wid, dtype=np.float32)
    keep_mask[idx] = 0.0
    steps = config.universal_steps
    alphas = cosine_schedule(config.patch_step_init, steps)
    clean_all = _clean_logits(images, victims)
    curve = []
    for t, bidx in enumerate(_iterate_shuffled(images.shape[0], config.batch_size, steps, rng)):
        kind = _pick_mechanism(config.mechanisms, rng)
        weights, mechanism = victims[kind]
        x = images[bidx]
        b = x.shape[0]
        leaf = Tensor(patch, requires_grad=True)
        with T.Tape():
            full = T.scatter_vector(leaf, idx, c * hgt * wid)
            base = Tensor((x.reshape(b, -1) * keep_mask).astype(np.float32))
            adv = T.reshape(T.add(base, T.broadcast_to(T.reshape(full, (1, -1)), (b, c * hgt * wid))),
                            (b, c, hgt, wid))
            logits, trace = model_forward(adv, weights, mechanism, ctx=RunContext(mode="attack"))
            atk = ATTACK_LOSSES[mechanism.kind](trace.state)
            per = atk if config.lam == 0 else T.add(
                atk, T.scale(loss_cls(logits, clean_all[kind][bidx]), config.lam))
            total = T.reduce_sum(per)
        T.backward(total)
        patch = np.clip(patch - alphas[t] * np.sign(leaf.grad), 0.0, 1.0)
        curve.append(float(per.data.mean()))
    return Perturbation(
        delta=patch.reshape(c, p, p), variant="universal_patch", epsilon=config.epsilon,
        lam=config.lam, iterations=steps, seed=config.seed, mechanisms=config.mechanisms,
        patch_pos=tuple(config.patch_pos), curve=curve)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def _task_ce(logits, labels):
    """Per-image cross-entropy against the true labels."""
    b = logits.shape[0]
    logq = T.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    return T.scale(T.reduce_sum(T.mul(Tensor(onehot), logq), axis=-1), -1.0)


def sponge_loss(trace):
    """Negative sum of squared activations (post-GELU FFN and attention
    outputs): minimizing it inflates the model's internal magnitudes."""
    total = None
    for act in trace.activations:
        axes = tuple(range(1, act.ndim))
        s = T.reduce_sum(T.square(act), axis=axes)
        total = s if total is None else T.add(total, s)
    return T.scale(total, -1.0)


def baseline_attack(kind, config: AttackConfig, images, labels, victims, image_ids=None):
    """Reference perturbations: uniform-random noise, task-loss PGD, and
    activation-inflating sponge updates (same loop, same budget)."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline '{kind}'")
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if image_ids is None:
        image_ids = np.arange(images.shape[0])
    rng = np.random.default_rng(config.seed)
    eps = config.epsilon
    perts = {}

    if kind == "random":
        for i, img_id in enumerate(image_ids):
            delta = rng.uniform(-eps, eps, size=images.shape[1:]).astype(np.float32)
            delta = np.clip(images[i] + delta, 0.0, 1.0) - images[i]
            perts[int(img_id)] = Perturbation(
                delta=delta, variant="random", epsilon=eps, lam=0.0, iterations=0,
                seed=config.seed, mechanisms=config.mechanisms, image_id=int(img_id))
        return perts

    weights, mechanism = victims[config.mechanisms[0]]
    alphas = cosine_schedule(config.step_init or eps / 10.0, config.iterations)
    for s in range(0, images.shape[0], config.batch_size):
        sl = slice(s, min(s + config.batch_size, images.shape[0]))
        x, y = images[sl], labels[sl]
        delta = np.zeros_like(x, dtype=np.float32)
        curve = []
        for t in range(config.iterations):
            leaf = Tensor(delta, requires_grad=True)
            with T.Tape():
                adv = compose_adv(x, leaf)
                if kind == "standard_pgd":
                    logits, _ = model_forward(adv, weights, mechanism, ctx=RunContext(mode="attack"))
                    per = T.scale(_task_ce(logits, y), -1.0)  # descend => maximize CE
                else:
                    ctx = RunContext(mode="attack", collect_activations=True)
                    _, trace = model_forward(adv, weights, mechanism, ctx=ctx)
                    per = sponge_loss(trace)
                total = T.reduce_sum(per)
            T.backward(total)
            delta = pgd_step(delta, leaf.grad, alphas[t], eps, x)
            curve.append(float(-per.data.mean()))
        for j, img_id in enumerate(image_ids[sl]):
            perts[int(img_id)] = Perturbation(
                delta=delta[j], variant=kind, epsilon=eps, lam=0.0,
                iterations=config.iterations, seed=config.seed,
                mechanisms=config.mechanisms, image_id=int(img_id), curve=curve)
    return perts
