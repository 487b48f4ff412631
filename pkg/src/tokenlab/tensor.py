"""Minimal reverse-mode autodiff engine on numpy arrays.

Provides exactly the operations the transformer, the sparsification
mechanisms, and the attack losses need. Operations record themselves on a
:class:`Tape` (a Wengert list); :func:`backward` replays the tape in exact
reverse insertion order and accumulates gradients into leaf tensors.

Conventions:
  * default precision is float32; pass ``dtype=np.float64`` at the leaves
    (or use :func:`use_dtype`) for gradient-check / determinism suites.
  * tensors without grad state are plain immutable value carriers and can
    be shared freely; a tape is confined to one thread.
  * ``sign(0) == 0`` so zero-gradient coordinates leave a perturbation
    untouched under sign-based updates.
"""

from __future__ import annotations

import math
import threading

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715
_XLOGX_EPS = 1e-12
_NORM_EPS = 1e-12

_state = threading.local()


def _default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype):
    """Set the dtype used for tensors built from lists/scalars."""
    _state.dtype = np.dtype(dtype).type


class use_dtype:
    """Context manager scoping the default dtype (e.g. float64 for checks)."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type

    def __enter__(self):
        self.prev = _default_dtype()
        _state.dtype = self.dtype
        return self

    def __exit__(self, *exc):
        _state.dtype = self.prev
        return False


def finite_checks_enabled():
    return getattr(_state, "finite_checks", True)


class finite_checks:
    """Context manager toggling per-op NaN/Inf detection."""

    def __init__(self, enabled):
        self.enabled = enabled

    def __enter__(self):
        self.prev = finite_checks_enabled()
        _state.finite_checks = self.enabled
        return self

    def __exit__(self, *exc):
        _state.finite_checks = self.prev
        return False


class Node:
    """One recorded operation: inputs, produced tensor, and its vjp."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered operation record for one differentiable computation.

    Use as a context manager around the forward pass; every op executed
    while the tape is active and touching a grad-requiring tensor appends
    a node. Tapes are thread-confined and must not be shared.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    @staticmethod
    def active():
        stack = getattr(_state, "tapes", None)
        return stack[-1] if stack else None


class Tensor:
    """N-dimensional value with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "node", "tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Small amount of operator sugar; the functional API is the contract.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(op, out_data, inputs, backward_fn):
    if finite_checks_enabled() and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite output from op '{op}'")
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = Tape.active()
    tensor_inputs = tuple(i for i in inputs if isinstance(i, Tensor))
    if tape is not None and any(i.requires_grad for i in tensor_inputs):
        out.requires_grad = True
        out.tape = tape
        node = Node(op, tensor_inputs, out, backward_fn)
        out.node = node
        tape.nodes.append(node)
    return out


def backward(root):
    """Populate ``grad`` on every grad-requiring leaf reachable from ``root``.

    ``root`` must be a scalar recorded on a tape. Repeated calls accumulate
    into leaf gradients until they are cleared.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward root must be a Tensor")
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    tape = root.tape
    if tape is None or not tape.nodes:
        raise RuntimeError("backward called before any recorded forward op")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        input_grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record("mul", out, (a, b), bwd)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record("div", out, (a, b), bwd)


def scale(t, s):
    """Multiply by a python scalar."""
    t = as_tensor(t)
    s = float(s)
    out = t.data * t.data.dtype.type(s)

    def bwd(g):
        return (g * t.data.dtype.type(s),)

    return _record("scale", out, (t,), bwd)


def square(t):
    t = as_tensor(t)
    out = t.data * t.data

    def bwd(g):
        return (g * 2.0 * t.data,)

    return _record("square", out, (t,), bwd)


def sqrt(t):
    t = as_tensor(t)
    out = np.sqrt(t.data)

    def bwd(g):
        return (g * 0.5 / np.maximum(out, _NORM_EPS),)

    return _record("sqrt", out, (t,), bwd)


def exp(t):
    t = as_tensor(t)
    out = np.exp(t.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", out, (t,), bwd)


def log(t):
    t = as_tensor(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(t.data)

    def bwd(g):
        return (g / t.data,)

    return _record("log", out, (t,), bwd)


def xlogx(t):
    """Entropy kernel x*log(x) with the continuous extension xlogx(0)=0."""
    t = as_tensor(t)
    safe = t.data > _XLOGX_EPS
    out = np.where(safe, t.data * np.log(np.maximum(t.data, _XLOGX_EPS)), 0.0)

    def bwd(g):
        return (g * np.where(safe, np.log(np.maximum(t.data, _XLOGX_EPS)) + 1.0, 0.0),)

    return _record("xlogx", out, (t,), bwd)


def relu(t):
    t = as_tensor(t)
    out = np.maximum(t.data, 0.0)

    def bwd(g):
        return (g * (t.data > 0.0).astype(t.data.dtype),)

    return _record("relu", out, (t,), bwd)


def sigmoid(t):
    t = as_tensor(t)
    x = t.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (t,), bwd)


def gelu(t):
    """GELU, tanh approximation (the form the gradient checks assume)."""
    t = as_tensor(t)
    x = t.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x**3)
    tanh_inner = np.tanh(inner)
    out = 0.5 * x * (1.0 + tanh_inner)

    def bwd(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x * x)
        d = 0.5 * (1.0 + tanh_inner) + 0.5 * x * (1.0 - tanh_inner * tanh_inner) * d_inner
        return (g * d,)

    return _record("gelu", out.astype(x.dtype), (t,), bwd)


# ---------------------------------------------------------------------------
# shape / indexing ops
# ---------------------------------------------------------------------------


def reshape(t, shape):
    t = as_tensor(t)
    orig = t.data.shape
    out = np.reshape(t.data, shape)

    def bwd(g):
        return (np.reshape(g, orig),)

    return _record("reshape", out, (t,), bwd)


def transpose(t, axes=None):
    t = as_tensor(t)
    if axes is None:
        if t.data.ndim < 2:
            raise ValueError("transpose needs at least 2 dims")
        axes = list(range(t.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(t.data, axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record("transpose", out, (t,), bwd)


def broadcast_to(t, shape):
    t = as_tensor(t)
    orig = t.data.shape
    out = np.broadcast_to(t.data, shape).copy()

    def bwd(g):
        return (_unbroadcast(g, orig),)

    return _record("broadcast_to", out, (t,), bwd)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of empty sequence")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record("concat", out, tuple(ts), bwd)


def take(t, indices, axis=0):
    """Gather rows/entries along ``axis`` (integer-array indexing)."""
    t = as_tensor(t)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(t.data, idx, axis=axis)
    shape = t.data.shape
    ax = axis % t.data.ndim

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (slice(None),) * ax + (idx,), g)
        return (full,)

    return _record("gather", out, (t,), bwd)


def scatter_vector(values, indices, size):
    """Inverse of 1-d take: zeros of length ``size`` with ``values`` at ``indices``."""
    v = as_tensor(values)
    if v.data.ndim != 1:
        raise ValueError("scatter_vector expects a 1-d value tensor")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != v.data.shape:
        raise ValueError("indices must match values shape")
    out = np.zeros(size, dtype=v.data.dtype)
    out[idx] = v.data

    def bwd(g):
        return (g[idx],)

    return _record("scatter", out, (v,), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


def reduce_sum(t, axis=None, keepdims=False):
    t = as_tensor(t)
    out = np.sum(t.data, axis=axis, keepdims=keepdims)
    shape = t.data.shape

    def bwd(g):
        return (_expand_reduced(g, shape, axis, keepdims),)

    return _record("sum", np.asarray(out), (t,), bwd)


def reduce_mean(t, axis=None, keepdims=False):
    t = as_tensor(t)
    out = np.mean(t.data, axis=axis, keepdims=keepdims)
    shape = t.data.shape
    count = t.data.size if axis is None else np.prod(
        [shape[a % len(shape)] for a in ((axis,) if isinstance(axis, int) else tuple(axis))]
    )

    def bwd(g):
        return (_expand_reduced(g, shape, axis, keepdims) / count,)

    return _record("mean", np.asarray(out), (t,), bwd)


def l2_norm(t, axis=-1, keepdims=False):
    t = as_tensor(t)
    out = np.sqrt(np.sum(t.data * t.data, axis=axis, keepdims=keepdims))
    shape = t.data.shape

    def bwd(g):
        n = _expand_reduced(np.maximum(out, _NORM_EPS), shape, axis, keepdims)
        ge = _expand_reduced(g, shape, axis, keepdims)
        return (ge * t.data / n,)

    return _record("l2_norm", np.asarray(out), (t,), bwd)


# ---------------------------------------------------------------------------
# linear algebra / normalization
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ValueError("matmul expects at least a matrix on the right")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record("matmul", out, (a, b), bwd)


def softmax(t, axis=-1):
    t = as_tensor(t)
    x = t.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (t,), bwd)


def log_softmax(t, axis=-1):
    t = as_tensor(t)
    x = t.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _record("log_softmax", out, (t,), bwd)


def layernorm(t, gain, bias, eps=1e-5):
    """Layer normalization over the last axis."""
    t, gain, bias = as_tensor(t), as_tensor(gain), as_tensor(bias)
    x = t.data
    if gain.data.shape != x.shape[-1:] or bias.data.shape != x.shape[-1:]:
        raise ValueError("layernorm gain/bias must match the last axis")
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * istd
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = istd * (dxhat - m1 - xhat * m2)
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        return dx, dgain, dbias

    return _record("layernorm", out.astype(x.dtype), (t, gain, bias), bwd)


# ---------------------------------------------------------------------------
# gates / non-differentiable pieces
# ---------------------------------------------------------------------------


def stop_gradient(t):
    """Detach: same values, no gradient path."""
    t = as_tensor(t)
    return Tensor(t.data.copy())


def sign(t):
    """Elementwise sign with sign(0) = 0. Not differentiable (constant)."""
    t = as_tensor(t)
    return Tensor(np.sign(t.data))


def gumbel_noise(shape, rng, dtype=None):
    """Pre-draw Gumbel(0,1) samples for a deterministic gating pass."""
    u = rng.random(shape)
    g = -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))
    return g.astype(dtype or _default_dtype())


def gumbel_softmax(logits, temperature=1.0, hard=False, noise=None, rng=None):
    """Gumbel-Softmax over the final axis.

    Soft mode returns simplex-valued probabilities; hard mode returns a
    one-hot forward value with the soft gradient (straight-through).
    Deterministic when ``noise`` is supplied; with no noise and no rng the
    noise defaults to zeros.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    lt = as_tensor(logits)
    if lt.data.shape[-1] < 2:
        raise ValueError("gumbel_softmax needs at least 2 logits on the final axis")
    if noise is None and rng is not None:
        noise = gumbel_noise(lt.data.shape, rng, dtype=lt.data.dtype)
    perturbed = lt if noise is None else add(lt, Tensor(np.asarray(noise, dtype=lt.data.dtype)))
    y = softmax(scale(perturbed, 1.0 / float(temperature)), axis=-1)
    if not hard:
        return y
    idx = np.argmax(y.data, axis=-1)
    onehot = np.zeros_like(y.data)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    # forward = onehot, backward = d(soft)
    return add(y, Tensor(onehot - y.data))


# ---------------------------------------------------------------------------
# dispatch surface
# ---------------------------------------------------------------------------

_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "log": log,
    "xlogx": xlogx,
    "relu": relu,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "concat": concat,
    "gather": take,
    "slice": take,
    "scatter": scatter_vector,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "l2_norm": l2_norm,
    "matmul": matmul,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layernorm": layernorm,
    "stop_gradient": stop_gradient,
    "sign": sign,
    "gumbel_softmax": gumbel_softmax,
}


def op_forward(kind, *inputs, **kwargs):
    """Evaluate one named operation; records on the active tape as usual."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unsupported op kind '{kind}'") from None
    return fn(*inputs, **kwargs)


def supported_ops():
    return sorted(_OPS)
