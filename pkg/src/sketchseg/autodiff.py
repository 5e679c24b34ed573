"""Minimal reverse-mode automatic differentiation on numpy arrays.

Design: ops run eagerly on ndarrays; when a Tape is active, each op whose
inputs require gradients appends its output node (with a backward closure) to
the tape.  Tape order is creation order, which is already topological, so
``backward`` is a single reverse sweep visiting each node once.  Without an
active tape ops build no graph, which is the inference fast path.

Float32 is the training dtype; gradient checking always runs on float64
tensors.  Every op verifies its output is finite and raises
FloatingPointError otherwise (disable via set_finite_checks for profiling).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import DataError

_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the per-op NaN/Inf guard; on by default."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


# ---------------------------------------------------------------------------
# tensor and tape

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, s):
        if isinstance(s, Tensor):
            raise TypeError("tensor/tensor division is not provided; multiply by a reciprocal")
        return mul(self, 1.0 / float(s))

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered op record for one forward pass; creation order is topological."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op: str, data: np.ndarray) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bwd
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep from loss; populates .grad on every contributing tensor."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tracked parameter")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor] | dict) -> None:
    vals = params.values() if isinstance(params, dict) else params
    for p in vals:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _record("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _record("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _record("mul", out, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def bwd(g):
        if x.requires_grad:
            _accum(x, -g)

    return _record("neg", -x.data, (x,), bwd)


def pow_const(x: Tensor, p: float) -> Tensor:
    x = _as_tensor(x)
    p = float(p)
    out = x.data ** p

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * p * x.data ** (p - 1.0))

    return _record("pow_const", out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * out)

    return _record("exp", out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.log(x.data)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g / x.data)

    return _record("log", out, (x,), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only where x was in range."""
    x = _as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * inside)

    return _record("clamp", out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return _record("relu", out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * out * (1.0 - out))

    return _record("sigmoid", out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _record("reshape", out, (x,), bwd)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = _as_tensor(x)
    return reshape(x, (x.data.shape[0], -1))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g.transpose(inv))

    return _record("transpose", out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, gp in zip(ts, parts):
            if t.requires_grad:
                _accum(t, gp)

    return _record("concat", out, ts, bwd)


def getitem(x: Tensor, key) -> Tensor:
    x = _as_tensor(x)
    out = x.data[key]

    def bwd(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, key, g)

    return _record("getitem", np.asarray(out), (x,), bwd)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not x.requires_grad:
            return
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(x, np.broadcast_to(gg, x.data.shape))

    return _record("reduce_sum", np.asarray(out), (x,), bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    scale = x.data.size / max(np.asarray(out).size, 1)

    def bwd(g):
        if not x.requires_grad:
            return
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(x, np.broadcast_to(gg, x.data.shape) / scale)

    return _record("reduce_mean", np.asarray(out), (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            _accum(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _record("matmul", out, (a, b), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the last axis."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax over the last axis.

    mask: optional boolean array broadcastable to x, True where attention is
    allowed; blocked positions get probability ~0.
    """
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        z = z + np.where(np.asarray(mask, dtype=bool), 0.0, -1e9).astype(z.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            _accum(x, out * (g - dot))

    return _record("softmax_lastdim", out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = _as_tensor(x)
    gain = _as_tensor(gain)
    bias = _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)

    return _record("layer_norm", out, (x, gain, bias), bwd)


def dropout(x: Tensor, rate: float, rng=None, training: bool = False) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng or seed")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.data.shape) >= rate) / np.asarray(1.0 - rate, dtype=x.dtype)
    keep = keep.astype(x.dtype)
    out = x.data * keep

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * keep)

    return _record("dropout", out, (x,), bwd)


# ---------------------------------------------------------------------------
# image ops

def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) with (F,C,kh,kw) kernels.

    Implemented as one matmul per kernel offset against strided input slices,
    so the heavy lifting stays in BLAS without materializing an im2col buffer
    of the full kh*kw expansion.
    """
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, c, h, wd = x.data.shape
    f, c2, kh, kw = w.data.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    out = np.zeros((n, f, ho * wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += np.matmul(w.data[:, :, i, j], patch.reshape(n, c, ho * wo))
    out = out.reshape(n, f, ho, wo)

    def bwd(g):
        g2 = g.reshape(n, f, ho * wo)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + stride * ho, stride),
                      slice(j, j + stride * wo, stride))
                if w.requires_grad:
                    patch = xp[sl].reshape(n, c, ho * wo)
                    if w.grad is None:
                        w.grad = np.zeros_like(w.data)
                    w.grad[:, :, i, j] += np.tensordot(g2, patch, axes=([0, 2], [0, 2]))
                if dxp is not None:
                    dxp[sl] += np.matmul(w.data[:, :, i, j].T, g2).reshape(n, c, ho, wo)
        if dxp is not None:
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
            _accum(x, dx)

    return _record("conv2d", out, (x, w), bwd)


def upsample2x_nearest(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("upsample2x_nearest expects (N,C,H,W)")
    n, c, h, wd = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g.reshape(n, c, h, 2, wd, 2).sum(axis=(3, 5)))

    return _record("upsample2x_nearest", out, (x,), bwd)


# ---------------------------------------------------------------------------
# attention and losses

def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask where True marks visible (non-future) positions."""
    return np.tril(np.ones((n, n), dtype=bool))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention over (T, D) sequences with learned
    projections; supports distinct query/key lengths for cross-attention."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    tq, d = q.data.shape
    tk = k.data.shape[0]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    hd = d // heads
    qh = transpose(reshape(matmul(q, wq), (tq, heads, hd)), (1, 0, 2))
    kh = transpose(reshape(matmul(k, wk), (tk, heads, hd)), (1, 0, 2))
    vh = transpose(reshape(matmul(v, wv), (tk, heads, hd)), (1, 0, 2))
    scores = mul(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(hd))
    attn = softmax_lastdim(scores, mask)
    ctx = matmul(attn, vh)
    merged = reshape(transpose(ctx, (1, 0, 2)), (tq, d))
    return matmul(merged, wo)


def mse_loss(a: Tensor, b) -> Tensor:
    """Mean of squared elementwise differences."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse_loss shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = sub(a, b)
    return reduce_mean(mul(diff, diff))


# ---------------------------------------------------------------------------
# initialization and optimizer

def _fan_in_out(shape: Sequence[int]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:  # (F, C, kh, kw) conv kernel
        rec = shape[2] * shape[3]
        return shape[1] * rec, shape[0] * rec
    n = int(np.prod(shape))
    return n, n


def glorot_uniform(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = _fan_in_out(tuple(shape))
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape)).astype(dtype)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict | None = None, state: AdamState | None = None) -> dict:
    """One bias-corrected Adam update, in place.

    grads defaults to each parameter's accumulated .grad; missing gradients
    count as zero (the moment buffers still decay).
    """
    if state is None:
        raise ValueError("adam_step needs an AdamState")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def adam_state_arrays(state: AdamState) -> dict:
    """Flatten optimizer state for checkpointing."""
    out = {"adam.step": np.asarray([float(state.step)], dtype=np.float32)}
    for name, arr in state.m.items():
        out[f"adam.m.{name}"] = arr
    for name, arr in state.v.items():
        out[f"adam.v.{name}"] = arr
    return out


def adam_state_from_arrays(arrays: dict, lr: float = 1e-4) -> AdamState:
    state = AdamState(lr=lr)
    for name, arr in arrays.items():
        if name == "adam.step":
            state.step = int(arr[0])
        elif name.startswith("adam.m."):
            state.m[name[len("adam.m."):]] = np.array(arr)
        elif name.startswith("adam.v."):
            state.v[name[len("adam.v."):]] = np.array(arr)
        else:
            raise DataError(f"unexpected optimizer state entry {name!r}")
    return state


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"CSEG"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict) -> None:
    """Versioned binary dump; parameters sorted by name, float32 little-endian."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(arrays):
            val = arrays[name]
            arr = val.data if isinstance(val, Tensor) else np.asarray(val)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 8:
        raise DataError(f"{path}: truncated checkpoint header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    off = 8
    total = len(blob)
    while off < total:
        try:
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            if total < off + nlen:
                raise struct.error("name")
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            count = int(np.prod(dims)) if dims else 1
            end = off + 4 * count
            if end > total:
                raise struct.error("data")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
            off = end
        except struct.error as e:
            raise DataError(f"{path}: truncated checkpoint record ({e})") from None
        arrays[name] = arr.astype(np.float32)
    return arrays


# ---------------------------------------------------------------------------
# gradient verification

def finite_difference_check(
    build_loss: Callable[[], Tensor],
    params: dict,
    h: float = 1e-4,
    max_entries: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients against central finite differences.

    build_loss recomputes the scalar loss from the current parameter values.
    Parameters must be float64.  Returns the worst error, measured as
    |analytic - numeric| / max(1, |analytic|, |numeric|) over a sample of
    entries per parameter (all entries when the parameter is small).
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"finite_difference_check needs float64 params ({name} is {p.data.dtype})")
    if rng is None:
        rng = np.random.default_rng(0)
    with Tape() as tape:
        loss = build_loss()
        zero_grad(params)
        backward(tape, loss)
    analytic = {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for n, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if size <= max_entries:
            idxs = np.arange(size)
        else:
            idxs = rng.choice(size, size=max_entries, replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + h
            fp = float(build_loss().data)
            flat[i] = keep - h
            fm = float(build_loss().data)
            flat[i] = keep
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst
