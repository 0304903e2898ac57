"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array; applying an operation while grad
mode is on records the node on an implicit tape (parent links plus a
vector-Jacobian callback). ``backward`` walks the graph once in reverse
topological order and accumulates ``.grad`` arrays on every node that
requires gradients.

Training runs in float32; verification (finite-difference checks) runs
in float64 via :func:`using_dtype`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "using_dtype",
    "default_dtype",
    "set_default_dtype",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv1d",
    "upsample_nearest",
    "linear",
    "group_norm",
    "silu",
    "relu",
    "absolute",
    "sqrt",
    "log",
    "softmax",
    "attention",
    "tsum",
    "tmean",
    "concat",
    "reshape",
    "transpose",
    "crop1d",
    "time_interp",
    "scale_shift",
    "rfft_mag",
    "mse",
    "mae",
]


class ShapeError(ValueError):
    """Raised when an operation receives incompatibly shaped operands."""


_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Visits each node exactly once; accumulates ``.grad`` on every
        node with ``requires_grad`` reachable from this output.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar output, got {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.data)
        }
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g
            else:
                node.grad = node.grad + g
            if node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and broadcast arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def stop_gradient(x: Tensor) -> Tensor:
    """Pass the value through, block the gradient entirely."""
    return Tensor(x.data)


def scale_shift(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Broadcast affine ``x * scale + shift``."""
    return add(mul(x, scale), shift)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(data, (a, b), vjp)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """1-d cross-correlation over (B, Cin, L) with weight (Cout, Cin, K)."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d operands, got x {x.shape}, w {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape} vs w {w.shape}")
    length = x.shape[2]
    kernel = w.shape[2]
    if length + 2 * pad < kernel:
        raise ShapeError(f"conv1d input too short: L={length}, K={kernel}, pad={pad}")
    data = kernels.conv1d_forward(x.data, w.data, stride, pad)

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv1d_grad_input(g, w.data, stride, pad, length)
        gw = kernels.conv1d_grad_weight(g, x.data, stride, pad, kernel)
        return gx, gw

    out = _node(data, (x, w), vjp)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"conv1d bias shape {bias.shape} != ({w.shape[0]},)")
        out = add(out, reshape(bias, (1, w.shape[0], 1)))
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: x @ w.T + b, with w (out, in)."""
    out = matmul(x, transpose(w, (1, 0)))
    if b is not None:
        out = add(out, b)
    return out


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling along the last (time) axis."""
    if x.ndim != 3:
        raise ShapeError(f"upsample_nearest expects (B, C, L), got {x.shape}")
    data = np.repeat(x.data, factor, axis=2)

    def vjp(g):
        b, c, lf = g.shape
        return (g.reshape(b, c, lf // factor, factor).sum(axis=3),)

    return _node(data, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------


def group_norm(x: Tensor, num_groups: int, eps: float = 1e-5) -> Tensor:
    """Per-(sample, group) standardization over (channels/groups, time)."""
    if x.ndim != 3:
        raise ShapeError(f"group_norm expects (B, C, L), got {x.shape}")
    b, c, length = x.shape
    if c % num_groups != 0:
        raise ShapeError(f"group_norm channels {c} not divisible by {num_groups} groups")
    xg = x.data.reshape(b, num_groups, (c // num_groups) * length)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mean) * inv
    data = xhat.reshape(b, c, length)

    def vjp(g):
        gg = g.reshape(b, num_groups, (c // num_groups) * length)
        gmean = gg.mean(axis=2, keepdims=True)
        gxhat = (gg * xhat).mean(axis=2, keepdims=True)
        gx = inv * (gg - gmean - xhat * gxhat)
        return (gx.reshape(b, c, length).astype(x.dtype, copy=False),)

    return _node(data, (x,), vjp)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def vjp(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _node(data, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def vjp(g):
        return (g * (x.data > 0.0).astype(g.dtype),)

    return _node(data, (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    data = np.abs(x.data)

    def vjp(g):
        return (g * np.sign(x.data),)

    return _node(data, (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def vjp(g):
        return (g * (0.5 / data),)

    return _node(data, (x,), vjp)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _node(data, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _node(data, (x,), vjp)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over (B, L, E) operands."""
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(
            f"attention expects (B, L, E) operands, got {q.shape}, {k.shape}, {v.shape}"
        )
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), _wrap(scale, q.dtype))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)


# ---------------------------------------------------------------------------
# reductions, shaping, splicing
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _node(data, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    elif isinstance(axis, tuple):
        count = math.prod(x.shape[a] for a in axis)
    else:
        count = x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), _wrap(1.0 / count, x.dtype))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(data, tuple(tensors), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _node(data, (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = np.argsort(axes)

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _node(data, (x,), vjp)


def crop1d(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start, stop) along the last axis."""
    if not (0 <= start < stop <= x.shape[-1]):
        raise ShapeError(f"crop1d [{start}, {stop}) out of range for {x.shape}")
    data = np.ascontiguousarray(x.data[..., start:stop])

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., start:stop] = g
        return (gx,)

    return _node(data, (x,), vjp)


def time_interp(x: Tensor, new_len: int) -> Tensor:
    """Linear interpolation along the last axis onto ``new_len`` points.

    Sample positions are aligned so the first and last frames map onto
    each other, which keeps note onsets in place across resolutions.
    """
    if x.ndim != 3:
        raise ShapeError(f"time_interp expects (B, C, L), got {x.shape}")
    old_len = x.shape[2]
    if old_len == new_len:
        return x
    if old_len == 1:
        pos = np.zeros(new_len)
    else:
        pos = np.linspace(0.0, old_len - 1.0, new_len)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, old_len - 1)
    frac = (pos - i0).astype(x.dtype)
    w0 = (1.0 - frac).astype(x.dtype)
    data = x.data[:, :, i0] * w0 + x.data[:, :, i1] * frac

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), i0), g * w0)
        np.add.at(gx, (slice(None), slice(None), i1), g * frac)
        return (gx,)

    return _node(data, (x,), vjp)


# ---------------------------------------------------------------------------
# spectral magnitude
# ---------------------------------------------------------------------------


def rfft_mag(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Magnitude of the real FFT along the last axis.

    The adjoint of rfft is an inverse FFT with interior bins halved
    (they appear twice in the Hermitian-symmetric spectrum).
    """
    n = x.shape[-1]
    spec = np.fft.rfft(x.data, axis=-1)
    mag = np.abs(spec)
    unit = spec / np.maximum(mag, floor)

    def vjp(g):
        gc = g * unit
        gc[..., 1 : (n + 1) // 2] *= 0.5
        gx = np.fft.irfft(gc, n=n, axis=-1) * n
        return (gx.astype(x.dtype, copy=False),)

    return _node(mag.astype(x.dtype, copy=False), (x,), vjp)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = sub(a, b)
    return tmean(mul(d, d))


def mae(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute error over all entries."""
    if a.shape != b.shape:
        raise ShapeError(f"mae shape mismatch: {a.shape} vs {b.shape}")
    return tmean(absolute(sub(a, b)))
