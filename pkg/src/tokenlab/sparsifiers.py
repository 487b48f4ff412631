"""Token sparsification mechanisms.

Three input-adaptive mechanisms share one protocol: given each block's
input they produce participation masks plus the differentiable internal
signals the attack losses consume.

* attention sampling ("ats"): parameter-free; per-block significance
  scores from the class token's attention row scaled by value norms,
  tokens kept by inverse-CDF sampling at fixed quantile points.
* decision gating ("adavit"): per-block linear heads emit keep/drop
  logits for patches, attention heads, and the MSA/FFN components,
  binarized with Gumbel-Softmax.
* halting ("avit"): a per-token score from the first embedding channel
  accumulates over depth; a token halts once the sum exceeds 1 - tau and
  stays inactive for all deeper blocks.

The class token is never dropped by any mechanism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .model import (
    BlockGates,
    ModelConfig,
    ModelWeights,
    RunContext,
    _attention_core,
    patchify_embed,
)

_DENOM_FLOOR = 1e-12
_DENOM_EPS = 1e-20


# ---------------------------------------------------------------------------
# attention-sampling mechanism (parameter-free)
# ---------------------------------------------------------------------------


@dataclass
class AtsConfig:
    start_block: int = 4          # 1-based first block that samples
    sample_count: int | None = None  # quantile points; default seq_len


def ats_significance(attn, v_heads, active=None):
    """Significance simplex over non-class tokens from one block's attention.

    Per head, score_j = A[class row, j] * ||V_j||, normalized over the
    active non-class tokens; head scores are summed and renormalized.
    Returns (S, fallback) where S is a (B, N) Tensor and fallback flags
    images whose denominator vanished (uniform scores substituted).
    """
    attn = T.as_tensor(attn)
    v_heads = T.as_tensor(v_heads)
    if attn.ndim == 3:
        attn = T.reshape(attn, (1,) + attn.shape)
        v_heads = T.reshape(v_heads, (1,) + v_heads.shape)
    b, h, seq = attn.shape[0], attn.shape[1], attn.shape[2]
    n = seq - 1
    if active is None:
        active = np.ones((b, seq), dtype=bool)
    active = np.asarray(active, dtype=bool)
    if active.ndim == 1:
        active = active[None]

    patch_idx = np.arange(1, seq)
    cls_row = T.reshape(T.take(attn, [0], axis=2), (b, h, seq))
    cls_to_patch = T.take(cls_row, patch_idx, axis=2)               # (B,H,N)
    vnorm = T.take(T.l2_norm(v_heads, axis=-1), patch_idx, axis=2)  # (B,H,N)
    w = T.mul(cls_to_patch, vnorm)
    denom = T.reduce_sum(w, axis=-1, keepdims=True)                 # (B,H,1)

    ok = denom.data >= _DENOM_FLOOR                                 # (B,H,1)
    per_head = T.div(w, T.add(denom, Tensor(np.full_like(denom.data, _DENOM_EPS))))
    fallback = ~ok.all(axis=(1, 2))
    if not ok.all():
        act = active[:, 1:]
        counts = np.maximum(act.sum(axis=-1, keepdims=True), 1)
        uniform = (act / counts).astype(per_head.data.dtype)        # (B,N)
        okf = ok.astype(per_head.data.dtype)
        per_head = T.add(
            T.mul(per_head, Tensor(okf)),
            T.mul(Tensor(uniform[:, None, :]), Tensor(1.0 - okf)),
        )
    summed = T.reduce_sum(per_head, axis=1)                         # (B,N)
    total = T.reduce_sum(summed, axis=-1, keepdims=True)
    scores = T.div(summed, T.add(total, Tensor(np.full_like(total.data, _DENOM_EPS))))
    return scores, fallback


def ats_inverse_cdf_sample(scores, sample_count):
    """Unique sorted token indices selected by inverse-CDF sampling.

    Evaluates psi(r) = smallest index n with CDF_n >= r at the fixed
    quantile points r = {1/2R, 3/2R, ..., (2R-1)/2R}; duplicate draws
    collapse to one instance.
    """
    s = np.asarray(scores, dtype=np.float64)
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    squeeze = s.ndim == 1
    if squeeze:
        s = s[None]
    if np.any(s < -1e-6):
        raise ValueError("scores must be non-negative")
    r = (2.0 * np.arange(1, sample_count + 1) - 1.0) / (2.0 * sample_count)
    cdf = np.cumsum(s, axis=-1)
    picks = []
    n = s.shape[-1]
    for row in cdf:
        idx = np.minimum(np.searchsorted(row, r, side="left"), n - 1)
        picks.append(np.unique(idx))
    return picks[0] if squeeze else picks


def _sample_keep_mask(scores_data, sample_count):
    """(B, N) bool keep mask from batched scores."""
    b, n = scores_data.shape
    keep = np.zeros((b, n), dtype=bool)
    for i, idx in enumerate(ats_inverse_cdf_sample(scores_data, sample_count)):
        keep[i, idx] = True
    return keep


class AtsState:
    def __init__(self, batch, seq_len):
        self.active = np.ones((batch, seq_len), dtype=bool)
        self.blocks = []
        self.scores = []          # Tensor (B, N) per attachment block
        self.unique_counts = []   # (B,) ints
        self.fallback = []        # (B,) bool


class AttentionSampling:
    """Inverse-CDF token sampling attached to the deeper blocks."""

    kind = "ats"
    persistent = True

    def __init__(self, model_config: ModelConfig, config: AtsConfig | None = None):
        self.model_config = model_config
        cfg = config or AtsConfig()
        if model_config.sparsifier_start_block is not None and config is None:
            cfg = AtsConfig(start_block=model_config.sparsifier_start_block)
        self.config = cfg
        self.sample_count = cfg.sample_count or model_config.seq_len

    def init_state(self, batch, cfg, ctx):
        return AtsState(batch, cfg.seq_len)

    def block_gates(self, block_index, Z, weights, state, ctx, defense=None):
        gates = BlockGates(key_active=state.active.copy(), row_active=state.active.copy())
        if block_index < self.config.start_block:
            if defense is not None:
                pruned = defense.prune(block_index, state.active, None)
                if not np.array_equal(pruned, state.active):
                    state.active = pruned
                    gates.key_active = pruned.copy()
                    gates.row_active = pruned.copy()
            return gates

        def refine(attn, v_heads):
            scores, fallback = ats_significance(attn, v_heads, state.active)
            keep = _sample_keep_mask(scores.data, self.sample_count)
            new_active = np.zeros_like(state.active)
            new_active[:, 0] = True
            new_active[:, 1:] = keep & state.active[:, 1:]
            if defense is not None:
                padded = np.zeros(state.active.shape, dtype=np.float64)
                padded[:, 1:] = scores.data
                new_active = defense.prune(block_index, new_active, padded)
            state.active = new_active
            state.blocks.append(block_index)
            state.scores.append(scores)
            state.unique_counts.append(new_active[:, 1:].sum(axis=-1))
            state.fallback.append(fallback)
            gates.row_active[:] = new_active

        gates.refine = refine
        return gates

    def finalize(self, state, trace):
        pass


def ats_forward_physical(image, weights: ModelWeights, config: AtsConfig | None = None):
    """Evaluation-mode forward that physically gathers sampled rows.

    Single image only. Returns (logits, kept index sets per block) for
    equivalence checks against the masking path.
    """
    cfg = weights.config
    ats = AttentionSampling(cfg, config)
    z = patchify_embed(image, weights)
    if z.ndim == 2:
        z = T.reshape(z, (1,) + z.shape)
    if z.shape[0] != 1:
        raise ValueError("physical-gather mode is single-image")
    kept = np.arange(cfg.seq_len)
    kept_per_block = []
    for li in range(cfg.depth):
        blk = weights.blocks[li]
        k = z.shape[1]
        all_on = np.ones((1, k), dtype=bool)
        u = T.layernorm(z, blk.ln1_g, blk.ln1_b, eps=cfg.layernorm_eps)
        attn, vh = _attention_core(u, blk, cfg, all_on)
        if li + 1 >= ats.config.start_block:
            scores, _ = ats_significance(attn, vh)
            sel_local = ats_inverse_cdf_sample(scores.data[0], ats.sample_count)
            sel_rows = np.concatenate([[0], sel_local + 1])
            attn = T.take(attn, sel_rows, axis=2)
            z = T.take(z, sel_rows, axis=1)
            kept = kept[sel_rows]
        else:
            sel_rows = np.arange(k)
        ctx_out = T.matmul(attn, vh)
        b_, k2 = 1, ctx_out.shape[2]
        merged = T.reshape(T.transpose(ctx_out, (0, 2, 1, 3)), (b_, k2, cfg.embed_dim))
        z = T.add(z, T.add(T.matmul(merged, blk.wo), blk.bo))
        v = T.layernorm(z, blk.ln2_g, blk.ln2_b, eps=cfg.layernorm_eps)
        hidden = T.gelu(T.add(T.matmul(v, blk.w1), blk.b1))
        z = T.add(z, T.add(T.matmul(hidden, blk.w2), blk.b2))
        kept_per_block.append(kept.copy())
    final = T.layernorm(z, weights.final_ln_g, weights.final_ln_b, eps=cfg.layernorm_eps)
    cls_embed = T.reshape(T.take(final, [0], axis=1), (1, cfg.embed_dim))
    logits = T.add(T.matmul(cls_embed, weights.head_w), weights.head_b)
    return logits, kept_per_block


# ---------------------------------------------------------------------------
# decision-gating mechanism
# ---------------------------------------------------------------------------


@dataclass
class GatingConfig:
    start_block: int = 2
    temperature: float = 1.0
    straight_through: bool = False  # pass mask gradients to the decision heads
    stochastic: bool = False        # draw gumbel noise (training-time exploration)


class GatingState:
    def __init__(self):
        self.blocks = []
        self.patch_soft = []   # Tensor (B, N)
        self.head_soft = []    # Tensor (B, H)
        self.comp_soft = []    # Tensor (B, 2)
        self.patch_hard = []   # np (B, N)
        self.head_hard = []
        self.comp_hard = []


def _binary_gumbel(logits, temperature, noise):
    """Keep-probabilities for scalar keep logits via two-class Gumbel-Softmax."""
    shape = logits.shape
    pair = T.concat(
        [T.reshape(logits, shape + (1,)), Tensor(np.zeros(shape + (1,), dtype=logits.dtype))],
        axis=-1,
    )
    soft = T.gumbel_softmax(pair, temperature=temperature, hard=False, noise=noise)
    return T.reshape(T.take(soft, [0], axis=soft.ndim - 1), shape)


class DecisionGating:
    """Per-block keep/drop policies for patches, heads, and components."""

    kind = "adavit"
    persistent = False

    def __init__(self, model_config: ModelConfig, config: GatingConfig | None = None):
        self.model_config = model_config
        cfg = config or GatingConfig()
        if model_config.sparsifier_start_block is not None and config is None:
            cfg = GatingConfig(start_block=model_config.sparsifier_start_block)
        self.config = cfg

    def init_state(self, batch, cfg, ctx):
        return GatingState()

    def decide(self, Z, gate_params, ctx: RunContext):
        """Raw keep-probabilities (soft) and binarized decisions for one block."""
        b, seq, d = Z.shape
        n = seq - 1
        h = self.model_config.heads
        patch_tokens = T.take(Z, np.arange(1, seq), axis=1)                # (B,N,d)
        cls = T.reshape(T.take(Z, [0], axis=1), (b, d))
        logit_p = T.reshape(T.add(T.matmul(patch_tokens, gate_params.wp), gate_params.bp), (b, n))
        logit_h = T.add(T.matmul(cls, gate_params.wh), gate_params.bh)      # (B,H)
        logit_b = T.add(T.matmul(cls, gate_params.wb), gate_params.bb)      # (B,2)
        noises = {"p": None, "h": None, "b": None}
        if self.config.stochastic and ctx.rng is not None:
            noises = {
                "p": T.gumbel_noise((b, n, 2), ctx.rng, Z.dtype),
                "h": T.gumbel_noise((b, h, 2), ctx.rng, Z.dtype),
                "b": T.gumbel_noise((b, 2, 2), ctx.rng, Z.dtype),
            }
        tau = self.config.temperature
        soft_p = _binary_gumbel(logit_p, tau, noises["p"])
        soft_h = _binary_gumbel(logit_h, tau, noises["h"])
        soft_b = _binary_gumbel(logit_b, tau, noises["b"])
        return soft_p, soft_h, soft_b

    def _gate_tensor(self, soft, hard):
        if self.config.straight_through:
            return T.add(soft, Tensor(hard.astype(soft.dtype) - soft.data))
        return Tensor(hard.astype(soft.dtype))

    def block_gates(self, block_index, Z, weights, state, ctx, defense=None):
        b, seq = Z.shape[0], Z.shape[1]
        if block_index < self.config.start_block:
            gates = BlockGates.all_active(b, seq)
            if defense is not None:
                pruned = defense.prune(block_index, gates.row_active, None)
                gates.row_active = pruned
                gates.key_active = pruned.copy()
            return gates
        gp = weights.gate_blocks[block_index - 1]
        soft_p, soft_h, soft_b = self.decide(Z, gp, ctx)
        hard_p = soft_p.data >= 0.5
        hard_h = soft_h.data >= 0.5
        hard_b = soft_b.data >= 0.5

        state.blocks.append(block_index)
        state.patch_soft.append(soft_p)
        state.head_soft.append(soft_h)
        state.comp_soft.append(soft_b)

        active = np.ones((b, seq), dtype=bool)
        active[:, 1:] = hard_p
        if defense is not None:
            padded = np.zeros((b, seq), dtype=np.float64)
            padded[:, 1:] = soft_p.data
            active = defense.prune(block_index, active, padded)
            hard_p = active[:, 1:]

        state.patch_hard.append(hard_p)
        state.head_hard.append(hard_h)
        state.comp_hard.append(hard_b)

        patch_gate = self._gate_tensor(soft_p, hard_p)
        head_gate = self._gate_tensor(soft_h, hard_h)
        comp_gate = self._gate_tensor(soft_b, hard_b)
        ones = Tensor(np.ones((b, 1), dtype=soft_p.dtype))
        row_gate = T.reshape(T.concat([ones, patch_gate], axis=1), (b, seq, 1))

        msa_on = hard_b[:, 0].astype(np.float64)
        ffn_on = hard_b[:, 1].astype(np.float64)
        return BlockGates(
            key_active=active.copy(),
            row_active=active.copy(),
            row_gate=row_gate,
            head_gate=T.reshape(head_gate, (b, self.model_config.heads, 1, 1)),
            msa_gate=T.reshape(T.take(comp_gate, [0], axis=1), (b, 1, 1)),
            ffn_gate=T.reshape(T.take(comp_gate, [1], axis=1), (b, 1, 1)),
            msa_on=msa_on,
            ffn_on=ffn_on,
            head_frac=(hard_h.mean(axis=1) * msa_on),
        )

    def finalize(self, state, trace):
        pass


# ---------------------------------------------------------------------------
# halting mechanism
# ---------------------------------------------------------------------------


@dataclass
class HaltingConfig:
    start_block: int = 2
    tau: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")


class HaltingState:
    def __init__(self, batch, n):
        self.cum = np.zeros((batch, n), dtype=np.float64)
        self.h = []               # Tensor (B, N) per halting block
        self.h_blocks = []
        self.active_before = []   # np (B, N) participation at each halting block
        self.halt_block = np.zeros((batch, n), dtype=np.int64)  # 0 = never halted


def avit_halting_step(Z, gamma, beta, state: HaltingState, block_index, tau):
    """One halting update: score from the first embedding channel, cumulative
    sums advanced, newly exceeding tokens recorded and deactivated deeper."""
    b, seq = Z.shape[0], Z.shape[1]
    z0 = T.reshape(T.take(T.take(Z, np.arange(1, seq), axis=1), [0], axis=2), (b, seq - 1))
    h = T.sigmoid(T.add(T.mul(z0, gamma), beta))
    active_now = state.cum < (1.0 - tau)
    state.cum = state.cum + h.data.astype(np.float64)
    newly = (state.cum >= (1.0 - tau)) & (state.halt_block == 0)
    state.halt_block[newly] = block_index
    state.h.append(h)
    state.h_blocks.append(block_index)
    state.active_before.append(active_now)
    return h, active_now


class AdaptiveHalting:
    """Cumulative per-token halting: active at block n iff the cumulative
    score before n is below 1 - tau; halting is monotone in depth."""

    kind = "avit"
    persistent = True

    def __init__(self, model_config: ModelConfig, config: HaltingConfig | None = None):
        self.model_config = model_config
        cfg = config or HaltingConfig()
        if model_config.sparsifier_start_block is not None and config is None:
            cfg = HaltingConfig(start_block=model_config.sparsifier_start_block)
        self.config = cfg

    def init_state(self, batch, cfg, ctx):
        return HaltingState(batch, cfg.num_patches)

    def block_gates(self, block_index, Z, weights, state, ctx, defense=None):
        b, seq = Z.shape[0], Z.shape[1]
        if block_index < self.config.start_block:
            gates = BlockGates.all_active(b, seq)
            if defense is not None:
                pruned = defense.prune(block_index, gates.row_active, None)
                gates.row_active = pruned
                gates.key_active = pruned.copy()
            return gates
        if weights.halt_gamma is None:
            raise ValueError("weights carry no halting parameters")
        _, active_now = avit_halting_step(
            Z, weights.halt_gamma, weights.halt_beta, state, block_index, self.config.tau
        )
        active = np.ones((b, seq), dtype=bool)
        active[:, 1:] = active_now
        if defense is not None:
            conf = np.zeros((b, seq), dtype=np.float64)
            conf[:, 1:] = -state.cum  # most-alive tokens score highest
            pruned = defense.prune(block_index, active, conf)
            removed = active[:, 1:] & ~pruned[:, 1:]
            if removed.any():
                state.cum[removed] = 2.0  # permanently above threshold
                state.halt_block[removed & (state.halt_block == 0)] = block_index
                state.active_before[-1] = pruned[:, 1:].copy()
            active = pruned
        return BlockGates(key_active=active.copy(), row_active=active.copy())

    def finalize(self, state, trace):
        pass


# ---------------------------------------------------------------------------
# factory
# ---------------------------------------------------------------------------

MECHANISM_KINDS = ("ats", "adavit", "avit")


def make_mechanism(kind, model_config: ModelConfig, **hyper):
    if kind == "ats":
        return AttentionSampling(model_config, AtsConfig(**hyper) if hyper else None)
    if kind == "adavit":
        return DecisionGating(model_config, GatingConfig(**hyper) if hyper else None)
    if kind == "avit":
        return AdaptiveHalting(model_config, HaltingConfig(**hyper) if hyper else None)
    raise ValueError(f"unknown mechanism kind '{kind}'")
