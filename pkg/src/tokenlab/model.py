"""Small vision transformer with per-block sparsifier hooks.

Pre-norm blocks (LayerNorm before MSA/FFN, eps 1e-5), class token at row 0,
learned positional embeddings. Dropped/halted tokens are excluded through
attention masking plus residual passthrough rather than physical removal,
so a sparsified forward stays shape-stable and differentiable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_BIAS = -1e9  # additive attention bias for masked keys


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 6
    embed_dim: int = 64
    heads: int = 4
    image_size: int = 32
    patch_size: int = 4
    num_classes: int = 10
    channels: int = 3
    mlp_ratio: int = 4
    layernorm_eps: float = 1e-5
    sparsifier_start_block: int | None = None  # None = mechanism default

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        for name in ("depth", "embed_dim", "heads", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self):
        return self.num_patches + 1

    @property
    def patch_dim(self):
        return self.channels * self.patch_size**2

    @property
    def head_dim(self):
        return self.embed_dim // self.heads

    def to_dict(self):
        return {
            "depth": self.depth,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "num_classes": self.num_classes,
            "channels": self.channels,
            "mlp_ratio": self.mlp_ratio,
            "layernorm_eps": self.layernorm_eps,
            "sparsifier_start_block": self.sparsifier_start_block,
        }

    @staticmethod
    def from_dict(d):
        return ModelConfig(**d)


class BlockParams:
    """Per-block tensors: layernorms, attention projections, FFN."""

    FIELDS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
              "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")
    __slots__ = FIELDS

    def __init__(self, **kw):
        for f in self.FIELDS:
            setattr(self, f, kw[f])


class GateParams:
    """Per-block decision heads for the gating mechanism."""

    FIELDS = ("wp", "bp", "wh", "bh", "wb", "bb")
    __slots__ = FIELDS

    def __init__(self, **kw):
        for f in self.FIELDS:
            setattr(self, f, kw[f])


class ModelWeights:
    """Full parameter set, checkpoint-nameable and iterable for training."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self._build_views()

    def _build_views(self):
        t = self.tensors
        self.embed_w = t["embed.w"]
        self.embed_b = t["embed.b"]
        self.cls = t["cls"]
        self.pos = t["pos"]
        self.final_ln_g = t["final_ln.g"]
        self.final_ln_b = t["final_ln.b"]
        self.head_w = t["head.w"]
        self.head_b = t["head.b"]
        self.blocks = []
        for i in range(self.config.depth):
            self.blocks.append(BlockParams(**{f: t[f"blk{i}.{f}"] for f in BlockParams.FIELDS}))
        self.halt_gamma = t.get("halt.gamma")
        self.halt_beta = t.get("halt.beta")
        if any(k.startswith("gate.") for k in t):
            self.gate_blocks = [
                GateParams(**{f: t[f"gate.blk{i}.{f}"] for f in GateParams.FIELDS})
                for i in range(self.config.depth)
            ]
        else:
            self.gate_blocks = None

    @property
    def has_halting(self):
        return self.halt_gamma is not None

    @property
    def has_gating(self):
        return self.gate_blocks is not None

    def parameters(self):
        return list(self.tensors.values())

    def named_parameters(self):
        return dict(self.tensors)

    def requires_grad_(self, flag=True):
        for p in self.tensors.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def zero_grad(self):
        for p in self.tensors.values():
            p.grad = None

    def astype(self, dtype):
        cast = {k: Tensor(v.data.astype(dtype)) for k, v in self.tensors.items()}
        return ModelWeights(self.config, cast)

    def copy(self):
        return ModelWeights(self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()})


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def init_weights(config: ModelConfig, seed=0, with_gating=False, with_halting=False,
                 dtype=np.float32) -> ModelWeights:
    """Fresh weights: truncated-normal projections at Glorot scale (at toy
    widths a flat 0.02 std starves the input-dependent pathway and training
    stalls at the label-prior optimum), embeddings at std 0.02."""
    rng = np.random.default_rng(seed)
    d, pd = config.embed_dim, config.patch_dim
    hidden = config.mlp_ratio * d
    t = {}

    def tn(shape, std=None):
        if std is None:  # Glorot for projection matrices
            std = math.sqrt(2.0 / (shape[0] + shape[-1]))
        return Tensor(_trunc_normal(rng, shape, std).astype(dtype))

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype))

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype))

    t["embed.w"] = tn((pd, d))
    t["embed.b"] = zeros((d,))
    t["cls"] = tn((d,), std=0.02)
    t["pos"] = tn((config.seq_len, d), std=0.02)
    for i in range(config.depth):
        t[f"blk{i}.ln1_g"] = ones((d,))
        t[f"blk{i}.ln1_b"] = zeros((d,))
        t[f"blk{i}.wq"] = tn((d, d))
        t[f"blk{i}.bq"] = zeros((d,))
        t[f"blk{i}.wk"] = tn((d, d))
        t[f"blk{i}.bk"] = zeros((d,))
        t[f"blk{i}.wv"] = tn((d, d))
        t[f"blk{i}.bv"] = zeros((d,))
        t[f"blk{i}.wo"] = tn((d, d))
        t[f"blk{i}.bo"] = zeros((d,))
        t[f"blk{i}.ln2_g"] = ones((d,))
        t[f"blk{i}.ln2_b"] = zeros((d,))
        t[f"blk{i}.w1"] = tn((d, hidden))
        t[f"blk{i}.b1"] = zeros((hidden,))
        t[f"blk{i}.w2"] = tn((hidden, d))
        t[f"blk{i}.b2"] = zeros((d,))
    t["final_ln.g"] = ones((d,))
    t["final_ln.b"] = zeros((d,))
    t["head.w"] = tn((d, config.num_classes))
    t["head.b"] = zeros((config.num_classes,))
    if with_halting:
        t["halt.gamma"] = Tensor(np.asarray(1.0, dtype=dtype))
        t["halt.beta"] = Tensor(np.asarray(-3.0, dtype=dtype))
    if with_gating:
        for i in range(config.depth):
            t[f"gate.blk{i}.wp"] = tn((d, 1))
            t[f"gate.blk{i}.bp"] = Tensor(np.full((1,), 2.0, dtype=dtype))
            t[f"gate.blk{i}.wh"] = tn((d, config.heads))
            t[f"gate.blk{i}.bh"] = Tensor(np.full((config.heads,), 2.0, dtype=dtype))
            t[f"gate.blk{i}.wb"] = tn((d, 2))
            t[f"gate.blk{i}.bb"] = Tensor(np.full((2,), 2.0, dtype=dtype))
    return ModelWeights(config, t)


# ---------------------------------------------------------------------------
# forward machinery
# ---------------------------------------------------------------------------


@dataclass
class RunContext:
    """Per-forward runtime switches shared with the mechanisms."""

    mode: str = "eval"  # eval | attack | train
    rng: np.random.Generator | None = None
    collect_activations: bool = False


@dataclass
class BlockGates:
    """Resolved masks for one block.

    ``key_active``/``row_active`` are boolean participation masks (class
    token always true); the optional tensor gates carry differentiable
    gating for mechanisms trained with straight-through estimators.
    """

    key_active: np.ndarray                      # (B, T) bool
    row_active: np.ndarray                      # (B, T) bool
    row_gate: Tensor | None = None              # (B, T, 1)
    head_gate: Tensor | None = None             # (B, H, 1, 1)
    msa_gate: Tensor | None = None              # (B, 1, 1)
    ffn_gate: Tensor | None = None              # (B, 1, 1)
    msa_on: np.ndarray | None = None            # (B,) float in {0,1}
    ffn_on: np.ndarray | None = None
    head_frac: np.ndarray | None = None         # (B,) effective active-head fraction
    refine: object = None                       # callable(A, v_heads) -> None, mutates masks

    @staticmethod
    def all_active(batch, seq_len):
        on = np.ones((batch, seq_len), dtype=bool)
        return BlockGates(key_active=on, row_active=on.copy())


class ForwardTrace:
    """Per-block participation record plus mechanism internals."""

    def __init__(self, config: ModelConfig, batch: int, mechanism="none"):
        self.mechanism = mechanism
        self.batch = batch
        self.depth = config.depth
        self.seq_len = config.seq_len
        self.heads = config.heads
        self.active = np.ones((config.depth, batch, config.seq_len), dtype=bool)
        self.head_frac = np.ones((config.depth, batch), dtype=np.float64)
        self.msa_on = np.ones((config.depth, batch), dtype=np.float64)
        self.ffn_on = np.ones((config.depth, batch), dtype=np.float64)
        self.state = None          # mechanism state (graph tensors for losses)
        self.activations = None    # optional list of Tensors (sponge targets)

    @property
    def active_counts(self):
        """(L, B) count of participating tokens per block."""
        return self.active.sum(axis=-1)

    def per_token_depth(self, image=0):
        """Deepest block (1-based) at which each non-class token participates."""
        act = self.active[:, image, 1:]  # (L, N)
        depth = np.zeros(act.shape[1], dtype=np.int64)
        for l in range(act.shape[0]):
            depth[act[l]] = l + 1
        return depth


def _with_batch(x):
    if isinstance(x, Tensor):
        if x.ndim == 3:
            return T.reshape(x, (1,) + x.shape), True
        return x, False
    arr = np.asarray(x)
    if arr.ndim == 3:
        return arr[None], True
    return arr, False


def patch_index(config: ModelConfig):
    """(N, patch_dim) flat pixel indices, channel-major within each patch."""
    c, s, p = config.channels, config.image_size, config.patch_size
    g = s // p
    idx = np.empty((g * g, config.patch_dim), dtype=np.intp)
    base = np.arange(c)[:, None, None] * s * s
    for gy in range(g):
        for gx in range(g):
            rows = np.arange(gy * p, gy * p + p)[None, :, None] * s
            cols = np.arange(gx * p, gx * p + p)[None, None, :]
            idx[gy * g + gx] = (base + rows + cols).reshape(-1)
    return idx


def patchify_embed(image, weights: ModelWeights):
    """Slice an image into patch tokens, project, prepend the class token,
    and add positional embeddings.

    Accepts (C, H, W) or (B, C, H, W), numpy or Tensor; returns (T, d) or
    (B, T, d) to match.
    """
    cfg = weights.config
    x, unbatched = _with_batch(image)
    shape = x.shape if isinstance(x, Tensor) else x.shape
    expect = (cfg.channels, cfg.image_size, cfg.image_size)
    if shape[1:] != expect:
        raise ValueError(f"image dims {shape[1:]} do not match config {expect}")
    if not isinstance(x, Tensor):
        if x.min() < -1e-6 or x.max() > 1 + 1e-6:
            raise ValueError("pixel values must lie in [0, 1]")
        x = Tensor(x)
    b = x.shape[0]
    flat = T.reshape(x, (b, cfg.channels * cfg.image_size**2))
    patches = T.take(flat, patch_index(cfg), axis=1)          # (B, N, pd)
    tokens = T.add(T.matmul(patches, weights.embed_w), weights.embed_b)
    cls = T.broadcast_to(T.reshape(weights.cls, (1, 1, cfg.embed_dim)), (b, 1, cfg.embed_dim))
    seq = T.add(T.concat([cls, tokens], axis=1), weights.pos)
    if unbatched:
        return T.reshape(seq, (cfg.seq_len, cfg.embed_dim))
    return seq


def _key_bias(key_active, dtype):
    bias = np.where(key_active, 0.0, NEG_BIAS).astype(dtype)
    return bias[:, None, None, :]  # (B,1,1,T)


def _split_heads(t, b, seq, heads, head_dim):
    return T.transpose(T.reshape(t, (b, seq, heads, head_dim)), (0, 2, 1, 3))


def _attention_core(z_norm, blk: BlockParams, cfg: ModelConfig, key_active):
    """Masked scaled dot-product attention; returns (A, per-head V)."""
    b, seq = z_norm.shape[0], z_norm.shape[1]
    h, dh = cfg.heads, cfg.head_dim
    q = T.add(T.matmul(z_norm, blk.wq), blk.bq)
    k = T.add(T.matmul(z_norm, blk.wk), blk.bk)
    v = T.add(T.matmul(z_norm, blk.wv), blk.bv)
    qh = _split_heads(q, b, seq, h, dh)
    kh = _split_heads(k, b, seq, h, dh)
    vh = _split_heads(v, b, seq, h, dh)
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if not key_active.all():
        scores = T.add(scores, Tensor(_key_bias(key_active, z_norm.dtype)))
    attn = T.softmax(scores, axis=-1)
    return attn, vh


@dataclass
class BlockActivations:
    """Intermediate products of one block exposed for inspection/tests."""

    attn: Tensor            # (B, H, T, T)
    v_heads: Tensor         # (B, H, T, dh)
    msa_out: Tensor | None  # (B, T, d) post output-projection
    ffn_hidden: Tensor | None


def attention_forward(Z, blk_or_weights, active_mask, config: ModelConfig | None = None):
    """Masked multi-head attention over ``Z`` for one block.

    ``active_mask`` marks tokens visible as keys; row 0 (class token) must
    be active and at least one token active. Masked keys receive exactly
    zero attention weight.
    """
    if isinstance(blk_or_weights, ModelWeights):
        cfg, blk = blk_or_weights.config, blk_or_weights.blocks[0]
    else:
        if config is None:
            raise ValueError("config required when passing raw block params")
        cfg, blk = config, blk_or_weights
    z, unbatched = _with_batch(Z if isinstance(Z, Tensor) else Tensor(np.asarray(Z)))
    mask = np.asarray(active_mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None]
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask disables every token")
    if not mask[:, 0].all():
        raise ValueError("class token (row 0) must stay active")
    attn, vh = _attention_core(z, blk, cfg, mask)
    return BlockActivations(attn=attn, v_heads=vh, msa_out=None, ffn_hidden=None)


def _apply_row_gate(update, gates: BlockGates):
    if gates.row_gate is not None:
        return T.mul(update, gates.row_gate)
    if not gates.row_active.all():
        g = gates.row_active.astype(update.dtype)[:, :, None]
        return T.mul(update, Tensor(g))
    return update


def block_forward(Z, blk: BlockParams, cfg: ModelConfig, gates: BlockGates,
                  collect=None):
    """One pre-norm residual block under the given masks.

    Disabled heads contribute zero to the MSA output; a disabled MSA/FFN
    component reduces to the identity; inactive rows pass through unchanged.
    """
    b, seq = Z.shape[0], Z.shape[1]
    skip_msa = gates.msa_gate is None and gates.msa_on is not None and not gates.msa_on.any()
    acts = None
    if not skip_msa:
        u = T.layernorm(Z, blk.ln1_g, blk.ln1_b, eps=cfg.layernorm_eps)
        attn, vh = _attention_core(u, blk, cfg, gates.key_active)
        if gates.refine is not None:
            gates.refine(attn, vh)
        ctx_out = T.matmul(attn, vh)                      # (B,H,T,dh)
        if gates.head_gate is not None:
            ctx_out = T.mul(ctx_out, gates.head_gate)
        merged = T.reshape(T.transpose(ctx_out, (0, 2, 1, 3)), (b, seq, cfg.embed_dim))
        msa_out = T.add(T.matmul(merged, blk.wo), blk.bo)
        update = _apply_row_gate(msa_out, gates)
        if gates.msa_gate is not None:
            update = T.mul(update, gates.msa_gate)
        Z = T.add(Z, update)
        acts = BlockActivations(attn=attn, v_heads=vh, msa_out=msa_out, ffn_hidden=None)
        if collect is not None:
            collect.append(msa_out)

    skip_ffn = gates.ffn_gate is None and gates.ffn_on is not None and not gates.ffn_on.any()
    if not skip_ffn:
        v = T.layernorm(Z, blk.ln2_g, blk.ln2_b, eps=cfg.layernorm_eps)
        hidden = T.gelu(T.add(T.matmul(v, blk.w1), blk.b1))
        ffn_out = T.add(T.matmul(hidden, blk.w2), blk.b2)
        update = _apply_row_gate(ffn_out, gates)
        if gates.ffn_gate is not None:
            update = T.mul(update, gates.ffn_gate)
        Z = T.add(Z, update)
        if acts is not None:
            acts.ffn_hidden = hidden
        if collect is not None:
            collect.append(hidden)
    return Z, acts


def model_forward(image, weights: ModelWeights, mechanism=None, defense=None,
                  ctx: RunContext | None = None):
    """Full forward pass: returns (logits Tensor (B, M), ForwardTrace).

    With no mechanism the trace reports every token active in every block.
    A defense runtime, when given, prunes each block's active set to its
    calibrated cap before the block computes.
    """
    cfg = weights.config
    ctx = ctx or RunContext()
    z, unbatched = _with_batch(image)
    seq = patchify_embed(z if isinstance(z, Tensor) else z, weights)
    if seq.ndim == 2:
        seq = T.reshape(seq, (1,) + seq.shape)
    b = seq.shape[0]
    trace = ForwardTrace(cfg, b, mechanism.kind if mechanism is not None else "none")
    collect = [] if ctx.collect_activations else None
    state = mechanism.init_state(b, cfg, ctx) if mechanism is not None else None
    for li in range(cfg.depth):
        block_index = li + 1  # 1-based
        if mechanism is not None:
            gates = mechanism.block_gates(block_index, seq, weights, state, ctx, defense)
        else:
            gates = BlockGates.all_active(b, cfg.seq_len)
            if defense is not None:
                gates.row_active = defense.prune(block_index, gates.row_active, None)
                gates.key_active = gates.row_active.copy()
        seq, _ = block_forward(seq, weights.blocks[li], cfg, gates, collect)
        trace.active[li] = gates.row_active & _participation(gates)
        if gates.head_frac is not None:
            trace.head_frac[li] = gates.head_frac
        if gates.msa_on is not None:
            trace.msa_on[li] = gates.msa_on
        if gates.ffn_on is not None:
            trace.ffn_on[li] = gates.ffn_on
    final = T.layernorm(seq, weights.final_ln_g, weights.final_ln_b, eps=cfg.layernorm_eps)
    cls_embed = T.reshape(T.take(final, [0], axis=1), (b, cfg.embed_dim))
    logits = T.add(T.matmul(cls_embed, weights.head_w), weights.head_b)
    trace.state = state
    trace.activations = collect
    if mechanism is not None:
        mechanism.finalize(state, trace)
    return logits, trace


def _participation(gates: BlockGates):
    """Tokens count as active only if the block computes anything for them;
    the class token is always reported active."""
    b, t = gates.row_active.shape
    if gates.msa_on is None and gates.ffn_on is None:
        return np.ones((b, t), dtype=bool)
    any_comp = np.zeros(b, dtype=bool)
    if gates.msa_on is not None:
        any_comp |= gates.msa_on > 0
    if gates.ffn_on is not None:
        any_comp |= gates.ffn_on > 0
    out = np.repeat(any_comp[:, None], t, axis=1)
    out[:, 0] = True
    return out
