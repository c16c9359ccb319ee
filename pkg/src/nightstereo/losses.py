"""Self-supervised training objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffmath import Tensor, as_tensor, ops
from .errors import ConfigurationError, ContractError, TrainingStepError

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LOG_EPS = 1e-6
DISPARITY_EPS = 1e-3


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.15
    gamma: float = 2.0
    beta1: float = 1.0
    beta2: float = 0.1
    c1: float = SSIM_C1
    c2: float = SSIM_C2
    log_eps: float = LOG_EPS

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0 or self.beta1 < 0 or self.beta2 < 0:
            raise ConfigurationError("gamma, beta1 and beta2 must be non-negative")


@dataclass(frozen=True)
class StereoRig:
    baseline: float                 # metres
    focal: float                    # pixels
    cx: float = 0.0
    cy: float = 0.0
    extrinsics: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not (self.baseline > 0 and self.focal > 0):
            raise ConfigurationError(f"baseline and focal length must be positive, got {self.baseline}, {self.focal}")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])


def disparity_to_depth(disparity, rig: StereoRig, eps: float = DISPARITY_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Depth in metres and a validity map; disparities below ``eps`` give depth 0 and are invalid."""
    d = np.asarray(disparity.data if isinstance(disparity, Tensor) else disparity, dtype=np.float64)
    valid = d >= eps
    depth = np.zeros_like(d)
    depth[valid] = rig.baseline * rig.focal / d[valid]
    return depth, valid


def depth_to_disparity(depth, rig: StereoRig) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(depth, dtype=np.float64)
    valid = z > 0
    disp = np.zeros_like(z)
    disp[valid] = rig.baseline * rig.focal / z[valid]
    return disp, valid


def ssim(a, b, c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """Per-pixel SSIM with 3×3 reflect-padded mean statistics."""
    a, b = as_tensor(a), as_tensor(b)
    mu_a = ops.avg_pool3x3(a)
    mu_b = ops.avg_pool3x3(b)
    var_a = ops.sub(ops.avg_pool3x3(ops.mul(a, a)), ops.mul(mu_a, mu_a))
    var_b = ops.sub(ops.avg_pool3x3(ops.mul(b, b)), ops.mul(mu_b, mu_b))
    cov = ops.sub(ops.avg_pool3x3(ops.mul(a, b)), ops.mul(mu_a, mu_b))
    num = ops.mul(ops.add(ops.mul(ops.mul(mu_a, mu_b), 2.0), c1), ops.add(ops.mul(cov, 2.0), c2))
    den = ops.mul(ops.add(ops.add(ops.mul(mu_a, mu_a), ops.mul(mu_b, mu_b)), c1),
                  ops.add(ops.add(var_a, var_b), c2))
    return ops.div(num, den)


def photometric_loss(left, right, disparity, cfg: LossConfig = LossConfig(), rig: StereoRig | None = None,
                     return_parts: bool = False):
    """L1 + SSIM reconstruction error of ``left`` from ``right`` warped by ``disparity``.

    Images are ``C×H×W`` in [0, 1]; the mean runs over warp-valid pixels only.
    ``rig`` is accepted for interface completeness; rectified inputs reduce the
    warp to a horizontal shift, so it does not enter the computation.
    """
    left, right, disparity = as_tensor(left), as_tensor(right), as_tensor(disparity)
    recon, valid = ops.bilinear_warp_1d(right, disparity, direction=1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("no warp-valid pixels for the photometric loss")
    l1 = ops.mean(ops.abs(ops.sub(left, recon)), axis=0)
    dssim = ops.mean(ops.mul(ops.sub(1.0, ssim(left, recon, cfg.c1, cfg.c2)), 0.5), axis=0)
    per_pixel = ops.add(ops.mul(l1, cfg.alpha), ops.mul(dssim, 1.0 - cfg.alpha))
    loss = ops.div(ops.sum(ops.mul(per_pixel, valid.astype(np.float64))), float(n_valid))
    if return_parts:
        return loss, recon, valid
    return loss


def distance_regularizer(distance, cfg: LossConfig = LossConfig()) -> Tensor:
    """Focal-modulated negative log of nearest-neighbour distances (clamped to [eps, 1])."""
    p = ops.clip(as_tensor(distance), cfg.log_eps, 1.0)
    mod = ops.power(ops.sub(1.0, p), cfg.gamma)
    return ops.neg(ops.mean(ops.mul(mod, ops.log(p, min_value=cfg.log_eps))))


def smoothness_loss(disparity, image) -> Tensor:
    """Edge-aware smoothness of the mean-normalised disparity; ``image`` is ``C×H×W``."""
    d = as_tensor(disparity)
    img = as_tensor(image).data
    norm = ops.div(d, ops.add(ops.mean(d), 1e-7))
    dx = ops.abs(ops.sub(norm[:, 1:], norm[:, :-1]))
    dy = ops.abs(ops.sub(norm[1:, :], norm[:-1, :]))
    wx = np.exp(-np.abs(img[:, :, 1:] - img[:, :, :-1]).mean(axis=0))
    wy = np.exp(-np.abs(img[:, 1:, :] - img[:, :-1, :]).mean(axis=0))
    return ops.add(ops.mean(ops.mul(dx, wx)), ops.mean(ops.mul(dy, wy)))


def total_loss(photo, reg, smooth, cfg: LossConfig = LossConfig()) -> Tensor:
    parts = {"photo": as_tensor(photo), "reg": as_tensor(reg), "smooth": as_tensor(smooth)}
    bad = {k: float(v.data) for k, v in parts.items() if not np.all(np.isfinite(v.data))}
    if bad:
        raise TrainingStepError(f"non-finite loss parts: {sorted(bad)}", diagnostics=bad)
    return ops.add(ops.add(parts["photo"], ops.mul(parts["reg"], cfg.beta1)),
                   ops.mul(parts["smooth"], cfg.beta2))
