"""Finite-difference verification of the op set.

Every registered op comes with a sampler that draws inputs away from the
op's kinks (abs/relu at zero, warp samples on integer coordinates, ties in
max, clip bounds). ``grad_check`` contracts the op output with a random
cotangent so that every output element contributes to the checked scalar.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward, no_tape


@dataclass(frozen=True)
class GradCheckResult:
    op: str
    max_rel_error: float
    tolerance: float
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_rel_error < self.tolerance


Sampler = Callable[[np.random.Generator, tuple], tuple[Callable[..., Tensor], list[np.ndarray]]]
REGISTRY: dict[str, tuple[Sampler, tuple, float]] = {}


def register(name: str, default_sizes: tuple, tolerance: float = 1e-4):
    def deco(fn: Sampler) -> Sampler:
        REGISTRY[name] = (fn, default_sizes, tolerance)
        return fn
    return deco


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


@register("add", ((3, 4),), 1e-6)
def _s_add(rng, sizes):
    (shape,) = sizes
    return ops.add, [rng.normal(size=shape), rng.normal(size=shape[-1:])]


@register("sub", ((3, 4),), 1e-6)
def _s_sub(rng, sizes):
    (shape,) = sizes
    return ops.sub, [rng.normal(size=shape), rng.normal(size=(shape[0], 1))]


@register("mul", ((3, 4),), 1e-6)
def _s_mul(rng, sizes):
    (shape,) = sizes
    return ops.mul, [rng.normal(size=shape), rng.normal(size=shape)]


@register("div", ((3, 4),), 1e-6)
def _s_div(rng, sizes):
    (shape,) = sizes
    return ops.div, [rng.normal(size=shape), _away_from_zero(rng, shape, 0.5)]


@register("neg", ((5,),), 1e-6)
def _s_neg(rng, sizes):
    return ops.neg, [rng.normal(size=sizes[0])]


@register("abs", ((6,),), 1e-6)
def _s_abs(rng, sizes):
    return ops.abs, [_away_from_zero(rng, sizes[0])]


@register("exp", ((6,),), 1e-6)
def _s_exp(rng, sizes):
    return ops.exp, [rng.normal(size=sizes[0])]


@register("log", ((6,),), 1e-6)
def _s_log(rng, sizes):
    return (lambda x: ops.log(x, min_value=1e-6)), [rng.uniform(0.2, 3.0, size=sizes[0])]


@register("sqrt", ((6,),), 1e-6)
def _s_sqrt(rng, sizes):
    return ops.sqrt, [rng.uniform(0.2, 3.0, size=sizes[0])]


@register("power", ((6,),), 1e-6)
def _s_power(rng, sizes):
    return (lambda x: ops.power(x, 2.5)), [rng.uniform(0.2, 2.0, size=sizes[0])]


@register("relu", ((8,),), 1e-6)
def _s_relu(rng, sizes):
    return ops.relu, [_away_from_zero(rng, sizes[0])]


@register("clip", ((8,),), 1e-6)
def _s_clip(rng, sizes):
    x = rng.choice([-1.5, -0.5, 0.0, 0.5, 1.5], size=sizes[0]) + rng.uniform(-0.3, 0.3, size=sizes[0])
    return (lambda t: ops.clip(t, -1.0, 1.0)), [x]


@register("sum", ((3, 4),), 1e-6)
def _s_sum(rng, sizes):
    return (lambda x: ops.sum(x, axis=1)), [rng.normal(size=sizes[0])]


@register("mean", ((3, 4),), 1e-6)
def _s_mean(rng, sizes):
    return (lambda x: ops.mean(x, axis=0, keepdims=True)), [rng.normal(size=sizes[0])]


@register("max", ((4, 5),), 1e-6)
def _s_max(rng, sizes):
    shape = sizes[0]
    x = np.stack([rng.permutation(shape[-1]) for _ in range(int(np.prod(shape[:-1])))]).reshape(shape)
    return (lambda t: ops.max(t, axis=-1)), [x + 0.1 * rng.uniform(size=shape)]


@register("softmax", ((7,),), 1e-6)
def _s_softmax(rng, sizes):
    return (lambda x: ops.softmax(x, axis=-1)), [rng.normal(size=sizes[0])]


@register("matmul", ((3, 4), (4, 2)), 1e-6)
def _s_matmul(rng, sizes):
    a, b = sizes
    return ops.matmul, [rng.normal(size=a), rng.normal(size=b)]


@register("transpose", ((2, 3, 4),), 1e-6)
def _s_transpose(rng, sizes):
    return (lambda x: ops.transpose(x, (2, 0, 1))), [rng.normal(size=sizes[0])]


@register("reshape", ((2, 6),), 1e-6)
def _s_reshape(rng, sizes):
    return (lambda x: ops.reshape(x, (3, 4))), [rng.normal(size=sizes[0])]


@register("concat", ((2, 3), (4, 3)), 1e-6)
def _s_concat(rng, sizes):
    a, b = sizes
    return (lambda x, y: ops.concat([x, y], axis=0)), [rng.normal(size=a), rng.normal(size=b)]


@register("getitem", ((4, 5),), 1e-6)
def _s_getitem(rng, sizes):
    return (lambda x: ops.getitem(x, (slice(1, 3), slice(None, None, 2)))), [rng.normal(size=sizes[0])]


@register("take", ((3, 6),), 1e-6)
def _s_take(rng, sizes):
    idx = np.array([[0, 2, 2], [5, 1, 0]])
    return (lambda x: ops.take(x, idx, axis=1)), [rng.normal(size=sizes[0])]


@register("conv2d", ((2, 6, 7), (3, 2, 3, 3)), 1e-4)
def _s_conv2d(rng, sizes):
    xs, ks = sizes
    bias = rng.normal(size=ks[0])
    return ((lambda x, k, b: ops.conv2d(x, k, b, stride=2, padding=1)),
            [rng.normal(size=xs), rng.normal(size=ks), bias])


@register("avg_pool3x3", ((2, 5, 6),), 1e-6)
def _s_pool(rng, sizes):
    return ops.avg_pool3x3, [rng.normal(size=sizes[0])]


@register("upsample_bilinear2x", ((2, 3, 4),), 1e-6)
def _s_up(rng, sizes):
    return ops.upsample_bilinear2x, [rng.normal(size=sizes[0])]


@register("bilinear_warp_1d", ((2, 4, 9),), 1e-4)
def _s_warp(rng, sizes):
    C, H, W = sizes[0]
    # integer part plus a fractional part kept clear of the sampling-grid kinks;
    # stay strictly inside the image so no sample crosses the validity edge
    whole = rng.integers(0, 3, size=(H, W)).astype(float)
    frac = rng.uniform(0.2, 0.8, size=(H, W))
    disp = whole + frac
    xs = np.arange(W)[None, :] + disp
    disp = np.where(xs < W - 1.2, disp, frac - 1.0)
    return (lambda im, d: ops.bilinear_warp_1d(im, d, direction=1)[0]), [rng.normal(size=(C, H, W)), disp]


def numeric_gradient(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], index: int,
                     step: float = 1e-5) -> np.ndarray:
    x = arrays[index]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f(arrays)
        flat[k] = orig - step
        fm = f(arrays)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise deviation, relative to the larger gradient's max magnitude."""
    scale = np.maximum(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(op: str, sizes: tuple | None = None, seed: int = 0, step: float = 1e-5) -> GradCheckResult:
    """Compare analytic and central-difference gradients for a registered op.

    Never raises: failures are reported in the result's ``error`` field.
    """
    try:
        sampler, default_sizes, tol = REGISTRY[op]
    except KeyError:
        return GradCheckResult(op, float("inf"), 0.0, error=f"unknown op {op!r}")
    try:
        rng = np.random.default_rng(seed)
        fn, arrays = sampler(rng, sizes or default_sizes)
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        probe = fn(*[Tensor(a) for a in arrays])
        cotangent = rng.normal(size=probe.shape)

        def scalar(arrs):
            with no_tape():
                return float((fn(*[Tensor(a) for a in arrs]).data * cotangent).sum())

        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = fn(*inputs)
            loss = ops.sum(ops.mul(out, cotangent))
        grads = backward(loss, tape)
        worst = 0.0
        for i, t in enumerate(inputs):
            num = numeric_gradient(scalar, [a.copy() for a in arrays], i, step)
            worst = np.maximum(worst, relative_error(grads[t], num))
        return GradCheckResult(op, float(worst), tol)
    except Exception as exc:  # reported, never raised
        return GradCheckResult(op, float("inf"), 0.0, error=f"{type(exc).__name__}: {exc}")


def check_all(seed: int = 0) -> list[GradCheckResult]:
    return [grad_check(name, seed=seed) for name in REGISTRY]
