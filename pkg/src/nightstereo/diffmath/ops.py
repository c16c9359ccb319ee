"""Differentiable operators.

Each op computes its forward value with numpy and hands a vector-Jacobian
product to :func:`emit`, which records it on the active tape. The op set is
closed: everything the stereo pipeline differentiates through lives here.
"""

from __future__ import annotations

import builtins
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor, emit


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return emit("add", a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return emit("sub", a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return emit("mul", a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                           _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return emit("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return emit("neg", -a.data, (a,), lambda g: (-g,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return emit("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return emit("exp", out, (a,), lambda g: (g * out,))


def log(a, min_value: float | None = None) -> Tensor:
    """Natural log; with ``min_value`` the input is clamped first (zero slope below)."""
    a = as_tensor(a)
    x = a.data if min_value is None else np.maximum(a.data, min_value)
    live = np.ones_like(x) if min_value is None else (a.data >= min_value).astype(np.float64)
    return emit("log", np.log(x), (a,), lambda g: (g * live / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return emit("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p

    def vjp(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        if p < 1.0:
            base = a.data
            safe = np.where(base == 0.0, 1.0, base)
            return (np.where(base == 0.0, 0.0, g * p * safe ** (p - 1.0)),)
        return (g * p * a.data ** (p - 1.0),)

    return emit("power", out, (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    live = a.data > 0
    return emit("relu", np.where(live, a.data, 0.0), (a,), lambda g: (g * live,))


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    live = np.ones(a.shape, dtype=bool)
    if lo is not None:
        live &= a.data >= lo
    if hi is not None:
        live &= a.data <= hi
    return emit("clip", out, (a,), lambda g: (g * live,))


# ----------------------------------------------------------------- reductions

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return emit("sum", out, (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // builtins.max(out.size, 1)
    return emit("mean", out, (a,), lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / n,))


def max(a, axis: int = -1) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient flows to the arg-max entry only."""
    a = as_tensor(a)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return emit("max", out, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return emit("softmax", out, (a,), vjp)


# ------------------------------------------------------------------ structure

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return emit("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return emit("transpose", np.transpose(a.data, axes), (a,),
                lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return emit("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return emit("getitem", a.data[key], (a,), vjp)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    key = (slice(None),) * axis + (idx,)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return emit("take", np.take(a.data, idx, axis=axis), (a,), vjp)


# ---------------------------------------------------------------- convolution

def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``C×H×W`` input with an ``O×C×kh×kw`` kernel."""
    x, k = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or k.ndim != 4:
        raise DimensionError(f"conv2d expects C×H×W and O×C×kh×kw, got {x.shape}, {k.shape}")
    C, H, W = x.shape
    O, Ck, kh, kw = k.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {Ck}")
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise ConfigurationError(f"invalid stride/padding {s}/{p}")
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ConfigurationError(f"kernel {kh}×{kw} does not fit input {H}×{W} with padding {p}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(Ho * Wo, C * kh * kw)
    kmat = k.data.reshape(O, C * kh * kw)
    out = (cols @ kmat.T).T.reshape(O, Ho, Wo)
    inputs = [x, k]
    if bias is not None:
        b = as_tensor(bias)
        out = out + b.data.reshape(O, 1, 1)
        inputs.append(b)

    def vjp(g):
        gm = g.reshape(O, Ho * Wo)
        gk = (gm @ cols).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gm).reshape(C, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += gcols[:, i, j]
            gx = gxp[:, p:p + H, p:p + W] if p else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return emit("conv2d", out, inputs, vjp)


# ---------------------------------------------------- separable linear resampling

@lru_cache(maxsize=64)
def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation weights, half-pixel aligned, edges clamped.

    Rows sum to one, so constant signals are preserved.
    """
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def box3_matrix(n: int) -> np.ndarray:
    """1-D three-tap mean filter with reflection at the borders."""
    m = np.zeros((n, n))
    for i in range(n):
        for off in (-1, 0, 1):
            j = i + off
            if n > 1:
                j = -j if j < 0 else (2 * (n - 1) - j if j > n - 1 else j)
            else:
                j = 0
            m[i, j] += 1.0 / 3.0
    m.setflags(write=False)
    return m


def _separable(op: str, a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    out = rows @ a.data @ cols.T
    return emit(op, out, (a,), lambda g: (rows.T @ g @ cols,))


def avg_pool3x3(a) -> Tensor:
    """3×3 mean filter over the last two axes, stride 1, reflect-padded."""
    a = as_tensor(a)
    H, W = a.shape[-2:]
    return _separable("avg_pool3x3", a, box3_matrix(H), box3_matrix(W))


def upsample_bilinear2x(a) -> Tensor:
    """Bilinear 2× upsampling of the last two axes (values unchanged)."""
    a = as_tensor(a)
    H, W = a.shape[-2:]
    return _separable("upsample_bilinear2x", a, interp_matrix(2 * H, H), interp_matrix(2 * W, W))


# ---------------------------------------------------------------------- warping

def bilinear_warp_1d(img, disparity, direction: int = 1) -> tuple[Tensor, np.ndarray]:
    """Sample ``img`` at ``x + direction * disparity`` along each row.

    Returns the warped ``C×H×W`` tensor and a boolean ``H×W`` validity map.
    Samples that fall outside ``[0, W-1]`` are zero and flagged invalid.
    """
    img, disp = as_tensor(img), as_tensor(disparity)
    if img.ndim != 3 or disp.shape != img.shape[1:]:
        raise DimensionError(f"warp expects C×H×W image and H×W disparity, got {img.shape}, {disp.shape}")
    sign = 1.0 if direction >= 0 else -1.0
    C, H, W = img.shape
    xs = np.arange(W, dtype=np.float64)[None, :] + sign * disp.data
    valid = (xs >= 0.0) & (xs <= W - 1)
    xc = np.clip(xs, 0.0, W - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), W - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    t = xc - x0
    rows = np.arange(H)[:, None]
    v0 = img.data[:, rows, x0]
    v1 = img.data[:, rows, x1]
    vmask = valid.astype(np.float64)
    out = ((1.0 - t) * v0 + t * v1) * vmask

    def vjp(g):
        gi = gd = None
        if img.requires_grad:
            gi = np.zeros_like(img.data)
            gv = g * vmask
            np.add.at(gi, (slice(None), rows, x0), gv * (1.0 - t))
            np.add.at(gi, (slice(None), rows, x1), gv * t)
        if disp.requires_grad:
            gd = sign * (g * (v1 - v0)).sum(axis=0) * vmask
        return gi, gd

    return emit("bilinear_warp_1d", out, (img, disp), vjp), valid


__all__ = [
    "add", "sub", "mul", "div", "neg", "abs", "exp", "log", "sqrt", "power", "relu", "clip",
    "sum", "mean", "max", "softmax", "matmul", "transpose", "reshape", "concat", "getitem",
    "take", "conv2d", "avg_pool3x3", "upsample_bilinear2x", "bilinear_warp_1d", "interp_matrix",
]
