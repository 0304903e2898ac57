"""Hot conv1d kernels with two interchangeable backends.

The numba backend gathers im2col columns in jitted loops and hands the
contraction to BLAS via ``np.dot``; the numpy backend builds the same
columns with stride tricks. Selection happens once at import time from
the ``TIMBRECAST_KERNELS`` environment variable (``numba`` or ``numpy``,
default ``numba`` when importable). ``benchmarks/bench_kernels.py``
compares both.

All kernels operate on contiguous float32/float64 arrays shaped
(batch, channels, length) for signals and (out_ch, in_ch, kernel) for
weights.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

__all__ = [
    "backend",
    "conv1d_forward",
    "conv1d_grad_input",
    "conv1d_grad_weight",
    "conv1d_out_len",
    "IMPLEMENTATIONS",
]


def conv1d_out_len(length: int, kernel: int, stride: int, pad: int) -> int:
    return (length + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _np_cols(xp: np.ndarray, kernel: int, stride: int, n_out: int) -> np.ndarray:
    """im2col: (B, Cin, Lp) -> (B*n_out, Cin*kernel) without copying twice."""
    b, cin, _ = xp.shape
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, cin, n_out, kernel), (s0, s1, s2 * stride, s2)
    )
    return np.ascontiguousarray(view.transpose(0, 2, 1, 3)).reshape(
        b * n_out, cin * kernel
    )


def _np_forward(x, w, stride, pad):
    b, cin, length = x.shape
    cout, _, kernel = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    n_out = conv1d_out_len(length, kernel, stride, pad)
    cols = _np_cols(xp, kernel, stride, n_out)
    out = cols @ w.reshape(cout, cin * kernel).T
    return np.ascontiguousarray(out.reshape(b, n_out, cout).transpose(0, 2, 1))


def _np_grad_input(grad_out, w, stride, pad, length):
    b, cout, n_out = grad_out.shape
    _, cin, kernel = w.shape
    go2 = np.ascontiguousarray(grad_out.transpose(0, 2, 1)).reshape(b * n_out, cout)
    gcols = go2 @ w.reshape(cout, cin * kernel)
    gcols = gcols.reshape(b, n_out, cin, kernel).transpose(0, 2, 1, 3)
    gxp = np.zeros((b, cin, length + 2 * pad), dtype=grad_out.dtype)
    span = (n_out - 1) * stride + 1
    for k in range(kernel):
        gxp[:, :, k : k + span : stride] += gcols[:, :, :, k]
    return np.ascontiguousarray(gxp[:, :, pad : pad + length])


def _np_grad_weight(grad_out, x, stride, pad, kernel):
    b, cin, length = x.shape
    cout = grad_out.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    n_out = grad_out.shape[2]
    cols = _np_cols(xp, kernel, stride, n_out)
    go2 = np.ascontiguousarray(grad_out.transpose(0, 2, 1)).reshape(b * n_out, cout)
    return (go2.T @ cols).reshape(cout, cin, kernel)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

try:  # pragma: no cover - exercised indirectly through backend dispatch
    import numba as _nb

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @_nb.njit(cache=True)
    def _nb_gather_cols(xp, kernel, stride, n_out):
        b, cin, _ = xp.shape
        cols = np.empty((b * n_out, cin * kernel), dtype=xp.dtype)
        for i in range(b):
            for lo in range(n_out):
                row = i * n_out + lo
                base = lo * stride
                for ci in range(cin):
                    off = ci * kernel
                    for k in range(kernel):
                        cols[row, off + k] = xp[i, ci, base + k]
        return cols

    @_nb.njit(cache=True)
    def _nb_pad(x, pad):
        b, c, length = x.shape
        xp = np.zeros((b, c, length + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + length] = x
        return xp

    @_nb.njit(cache=True)
    def _nb_forward_core(xp, w2t, kernel, stride, n_out):
        b = xp.shape[0]
        cout = w2t.shape[1]
        cols = _nb_gather_cols(xp, kernel, stride, n_out)
        out2 = np.dot(cols, w2t)
        out = np.empty((b, cout, n_out), dtype=xp.dtype)
        for i in range(b):
            for lo in range(n_out):
                row = i * n_out + lo
                for co in range(cout):
                    out[i, co, lo] = out2[row, co]
        return out

    @_nb.njit(cache=True)
    def _nb_grad_input_core(grad_out, w2, kernel, stride, pad, length):
        b, cout, n_out = grad_out.shape
        cink = w2.shape[1]
        cin = cink // kernel
        go2 = np.empty((b * n_out, cout), dtype=grad_out.dtype)
        for i in range(b):
            for lo in range(n_out):
                row = i * n_out + lo
                for co in range(cout):
                    go2[row, co] = grad_out[i, co, lo]
        gcols = np.dot(go2, w2)
        gxp = np.zeros((b, cin, length + 2 * pad), dtype=grad_out.dtype)
        for i in range(b):
            for lo in range(n_out):
                row = i * n_out + lo
                base = lo * stride
                for ci in range(cin):
                    off = ci * kernel
                    for k in range(kernel):
                        gxp[i, ci, base + k] += gcols[row, off + k]
        return gxp[:, :, pad : pad + length].copy()

    @_nb.njit(cache=True)
    def _nb_grad_weight_core(grad_out, xp, kernel, stride):
        b, cout, n_out = grad_out.shape
        goT = np.empty((cout, b * n_out), dtype=grad_out.dtype)
        for i in range(b):
            for lo in range(n_out):
                row = i * n_out + lo
                for co in range(cout):
                    goT[co, row] = grad_out[i, co, lo]
        cols = _nb_gather_cols(xp, kernel, stride, n_out)
        return np.dot(goT, cols)

    def _nb_forward(x, w, stride, pad):
        cout, cin, kernel = w.shape
        xp = _nb_pad(x, pad) if pad else np.ascontiguousarray(x)
        n_out = conv1d_out_len(x.shape[2], kernel, stride, pad)
        w2t = np.ascontiguousarray(w.reshape(cout, cin * kernel).T)
        return _nb_forward_core(xp, w2t, kernel, stride, n_out)

    def _nb_grad_input(grad_out, w, stride, pad, length):
        cout, cin, kernel = w.shape
        w2 = np.ascontiguousarray(w.reshape(cout, cin * kernel))
        return _nb_grad_input_core(
            np.ascontiguousarray(grad_out), w2, kernel, stride, pad, length
        )

    def _nb_grad_weight(grad_out, x, stride, pad, kernel):
        cout = grad_out.shape[1]
        cin = x.shape[1]
        xp = _nb_pad(x, pad) if pad else np.ascontiguousarray(x)
        gw2 = _nb_grad_weight_core(np.ascontiguousarray(grad_out), xp, kernel, stride)
        return gw2.reshape(cout, cin, kernel)


IMPLEMENTATIONS = {
    "numpy": {
        "forward": _np_forward,
        "grad_input": _np_grad_input,
        "grad_weight": _np_grad_weight,
    }
}
if _HAVE_NUMBA:
    IMPLEMENTATIONS["numba"] = {
        "forward": _nb_forward,
        "grad_input": _nb_grad_input,
        "grad_weight": _nb_grad_weight,
    }


def _select_backend() -> str:
    requested = os.environ.get("TIMBRECAST_KERNELS", "").strip().lower()
    if requested and requested not in ("numpy", "numba"):
        raise ValueError(
            f"TIMBRECAST_KERNELS must be 'numpy' or 'numba', got {requested!r}"
        )
    if requested == "numba" and not _HAVE_NUMBA:
        warnings.warn("numba not importable, falling back to numpy kernels")
        return "numpy"
    if requested:
        return requested
    return "numba" if _HAVE_NUMBA else "numpy"


_BACKEND = _select_backend()
_ACTIVE = IMPLEMENTATIONS[_BACKEND]


def backend() -> str:
    """Name of the kernel backend selected at import time."""
    return _BACKEND


def conv1d_forward(x, w, stride=1, pad=0):
    """Cross-correlation of (B, Cin, L) with (Cout, Cin, K), zero padded."""
    return _ACTIVE["forward"](x, w, stride, pad)


def conv1d_grad_input(grad_out, w, stride, pad, length):
    """Gradient of conv1d_forward w.r.t. its input signal."""
    return _ACTIVE["grad_input"](grad_out, w, stride, pad, length)


def conv1d_grad_weight(grad_out, x, stride, pad, kernel):
    """Gradient of conv1d_forward w.r.t. the weight tensor."""
    return _ACTIVE["grad_weight"](grad_out, x, stride, pad, kernel)
