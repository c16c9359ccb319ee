"""Feature providers (file-backed or a small trainable encoder) and the projection head.

Internally every map is a ``C×h×w`` tensor. Files store ``h×w×C`` so they
line up with how encoder dumps are usually written.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .diffmath import Tensor, ops
from .errors import ConfigurationError, ContractError, DimensionError, FormatError

log = logging.getLogger(__name__)

TOY_CHANNELS = 64
DEFAULT_DIM = 128


@dataclass
class RawFeatureMap:
    fine: Tensor      # C×(H/4)×(W/4)
    coarse: Tensor    # C×(H/8)×(W/8)
    source: str       # "file" | "toy-encoder" | "oracle"

    def __post_init__(self):
        check_scale_contract(self.fine.shape, self.coarse.shape)

    @property
    def channels(self) -> int:
        return self.fine.shape[0]


@dataclass
class FeaturePyramid:
    fine: Tensor      # D×h'×w'
    coarse: Tensor    # D×h×w

    @property
    def dim(self) -> int:
        return self.coarse.shape[0]


def check_scale_contract(fine_shape, coarse_shape, image_size=None) -> None:
    """Fine maps are exactly twice the coarse grid; the coarse grid is the image over 8."""
    if len(fine_shape) != 3 or len(coarse_shape) != 3:
        raise ContractError(f"feature maps must be rank 3, got {fine_shape} and {coarse_shape}")
    if fine_shape[0] != coarse_shape[0] or fine_shape[0] <= 0:
        raise ContractError(f"channel counts differ or are empty: {fine_shape[0]} vs {coarse_shape[0]}")
    if fine_shape[1] != 2 * coarse_shape[1] or fine_shape[2] != 2 * coarse_shape[2]:
        raise ContractError(f"fine grid {fine_shape[1:]} is not twice the coarse grid {coarse_shape[1:]}")
    if image_size is not None:
        H, W = image_size
        if H % 8 or W % 8:
            raise ContractError(f"image size {H}×{W} is not divisible by 8")
        if (coarse_shape[1], coarse_shape[2]) != (H // 8, W // 8):
            raise ContractError(f"coarse grid {coarse_shape[1:]} does not match image {H}×{W} / 8")


# ------------------------------------------------------------------- file IO

def save_feature_tensor(path, fine: np.ndarray, coarse: np.ndarray, dtype=np.float64) -> None:
    """Write fine/coarse maps given as ``h×w×C`` arrays."""
    container.write(path, {"fine": np.asarray(fine, dtype=dtype), "coarse": np.asarray(coarse, dtype=dtype)})


def load_feature_tensor(path, image_size: tuple[int, int] | None = None) -> RawFeatureMap:
    slots = container.read(path)
    missing = {"fine", "coarse"} - slots.keys()
    if missing:
        raise FormatError(f"{path}: missing slots {sorted(missing)}")
    fine = np.asarray(slots["fine"], dtype=np.float64)
    coarse = np.asarray(slots["coarse"], dtype=np.float64)
    if fine.ndim != 3 or coarse.ndim != 3:
        raise ContractError(f"{path}: slots must be h×w×C, got {fine.shape} and {coarse.shape}")
    fine_chw = np.ascontiguousarray(fine.transpose(2, 0, 1))
    coarse_chw = np.ascontiguousarray(coarse.transpose(2, 0, 1))
    check_scale_contract(fine_chw.shape, coarse_chw.shape, image_size)
    return RawFeatureMap(Tensor(fine_chw), Tensor(coarse_chw), source="file")


# ------------------------------------------------------------------ modules

def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


def channel_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-position standardisation over channels (a parameter-free layer norm)."""
    centred = ops.sub(x, ops.mean(x, axis=0, keepdims=True))
    var = ops.mean(ops.mul(centred, centred), axis=0, keepdims=True)
    return ops.div(centred, ops.sqrt(ops.add(var, eps)))


class ToyEncoder:
    """Strided conv stack standing in for a frozen foundation-model encoder.

    Full resolution → /2 → /4 (fine) → /8 (coarse); ``TOY_CHANNELS`` outputs.
    Outputs are layer-normalised per position, like transformer tokens; without
    it the shared positive component of ReLU features swamps the dot products
    the matcher relies on.
    """

    widths = (32, 48, TOY_CHANNELS, TOY_CHANNELS)
    strides = (1, 2, 2, 2)

    def __init__(self, rng: np.random.Generator, in_channels: int = 3):
        self.params: dict[str, Tensor] = {}
        c = in_channels
        for i, (w, s) in enumerate(zip(self.widths, self.strides)):
            self.params[f"conv{i}.w"] = Tensor(he_normal(rng, (w, c, 3, 3), c * 9), requires_grad=True)
            self.params[f"conv{i}.b"] = Tensor(np.zeros(w), requires_grad=True)
            c = w

    def __call__(self, image: Tensor) -> RawFeatureMap:
        """``image`` is ``3×H×W`` with H and W divisible by 8."""
        _, H, W = image.shape
        if H % 8 or W % 8:
            raise ConfigurationError(f"toy encoder needs H, W divisible by 8, got {H}×{W}")
        p = self.params
        x = ops.sub(image, 0.5)
        x = ops.relu(ops.conv2d(x, p["conv0.w"], p["conv0.b"], stride=1, padding=1))
        x = ops.relu(ops.conv2d(x, p["conv1.w"], p["conv1.b"], stride=2, padding=1))
        fine = ops.conv2d(x, p["conv2.w"], p["conv2.b"], stride=2, padding=1)
        coarse = ops.conv2d(ops.relu(fine), p["conv3.w"], p["conv3.b"], stride=2, padding=1)
        return RawFeatureMap(channel_norm(fine), channel_norm(coarse), source="toy-encoder")


def toy_encoder(image, encoder: ToyEncoder) -> RawFeatureMap:
    """Encode an ``H×W×3`` array (or ``3×H×W`` tensor) with ``encoder``."""
    if not isinstance(image, Tensor):
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise DimensionError(f"expected H×W×3 image, got {arr.shape}")
        image = Tensor(arr.transpose(2, 0, 1))
    return encoder(image)


class ProjectionHead:
    """1×1 conv → ReLU → 1×1 conv, shared by both views and both scales."""

    def __init__(self, in_channels: int, dim: int = DEFAULT_DIM, rng: np.random.Generator | None = None,
                 hidden: int | None = None):
        if in_channels <= 0 or dim <= 0:
            raise ConfigurationError("projection head needs positive channel counts")
        if dim >= in_channels:
            log.warning("projection dim %d is not below the raw channel count %d", dim, in_channels)
        rng = rng or np.random.default_rng(0)
        hidden = hidden or dim
        self.in_channels, self.dim = in_channels, dim
        self.params = {
            "w1": Tensor(he_normal(rng, (hidden, in_channels, 1, 1), in_channels), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(he_normal(rng, (dim, hidden, 1, 1), hidden, gain=1.0), requires_grad=True),
            "b2": Tensor(np.zeros(dim), requires_grad=True),
        }

    @classmethod
    def identity(cls, channels: int) -> "ProjectionHead":
        head = cls.__new__(cls)
        head.in_channels = head.dim = channels
        eye = np.eye(channels).reshape(channels, channels, 1, 1)
        head.params = {
            "w1": Tensor(eye, requires_grad=True),
            "b1": Tensor(np.zeros(channels), requires_grad=True),
            "w2": Tensor(eye, requires_grad=True),
            "b2": Tensor(np.zeros(channels), requires_grad=True),
        }
        return head

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.in_channels:
            raise DimensionError(f"projection head expects {self.in_channels} channels, got {x.shape[0]}")
        p = self.params
        h = ops.relu(ops.conv2d(x, p["w1"], p["b1"]))
        return ops.conv2d(h, p["w2"], p["b2"])


def project(raw: RawFeatureMap, head: ProjectionHead) -> FeaturePyramid:
    return FeaturePyramid(fine=head(raw.fine), coarse=head(raw.coarse))


def pca_variance_report(features, k: int) -> float:
    """Fraction of total variance captured by the first ``k`` principal components.

    ``features`` is an ``n×D'`` array of samples.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"expected an n×D array, got shape {x.shape}")
    n, dim = x.shape
    if k < 1 or k > dim:
        raise ContractError(f"k must lie in [1, {dim}], got {k}")
    if n < k:
        raise ContractError(f"need at least k={k} samples, got {n}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(n - 1, 1)
    eig = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = eig.sum()
    if total == 0.0:
        return 1.0
    return float(min(eig[:k].sum() / total, 1.0))


def flatten_features(fmap: np.ndarray) -> np.ndarray:
    """``C×h×w`` map → ``(h·w)×C`` sample matrix."""
    c = fmap.shape[0]
    return np.asarray(fmap).reshape(c, -1).T


def load_provider_pair(root: Path, stem: str, image_size) -> tuple[RawFeatureMap, RawFeatureMap]:
    """Left/right raw maps from ``root/features/{left,right}/<stem>.nslt``."""
    left = load_feature_tensor(root / "features" / "left" / f"{stem}.nslt", image_size)
    right = load_feature_tensor(root / "features" / "right" / f"{stem}.nslt", image_size)
    return left, right
