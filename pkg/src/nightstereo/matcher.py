"""Stereo matching over projected feature pyramids.

Sign convention: the second view is the one in which matches sit to the
right, so a pixel at column ``x`` in the first view corresponds to column
``x + d`` in the second and ``d = ReLU(G - P)`` is non-negative for true
correspondences. Disparities are expressed in pixels of the grid they live on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffmath import Tensor, ops
from .errors import ContractError, DimensionError
from .features import FeaturePyramid, he_normal

DEFAULT_ZETA = 0.2
REFINE_RADIUS = 8
UPSAMPLE_FACTOR = 4
_OUT_OF_RANGE = -1e9
_NORM_EPS = 1e-12


# ---------------------------------------------------------------- data types

@dataclass
class MatchingDistribution:
    volume: Tensor      # h×w×w
    weights: Tensor     # h×w×w, rows sum to one
    grid: np.ndarray    # w
    expected: Tensor    # h×w, expected match column


@dataclass
class DisparityField:
    values: Tensor
    scale: float        # 1/8, 1/4 or 1
    stage: str          # coarse | masked | global | upsampled | refined | output | full

    def __post_init__(self):
        assert_nonnegative(self.values, self.stage)


@dataclass
class ValidityMask:
    distance: np.ndarray   # nearest-neighbour distance per feature, in [0, 2]
    mask: np.ndarray       # bool, True where distance > zeta
    zeta: float


@dataclass
class NeighborDistance:
    distance: Tensor       # h×w
    neighbor: np.ndarray   # flat index of each feature's nearest neighbour
    degenerate: np.ndarray # bool, zero-norm features


def assert_nonnegative(values: Tensor, stage: str) -> None:
    if np.any(values.data < 0):
        raise ContractError(f"negative disparity at stage {stage!r}: min {values.data.min()}")


# --------------------------------------------------------------- transformer

def positional_encoding(width: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding of the column index, ``width×dim``."""
    pos = np.arange(width, dtype=np.float64)[:, None]
    i = np.arange(dim)[None, :]
    freq = 1.0 / (10000.0 ** ((i // 2) * 2.0 / dim))
    ang = pos * freq
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


class EpipolarTransformer:
    """Single-head self- then cross-attention restricted to image rows.

    Each query attends to keys in its own row of its own image (self) and in
    the same row of the other image (cross). Both views share weights.
    """

    def __init__(self, dim: int, rng: np.random.Generator | None = None, init_scale: float = 1.0):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.params: dict[str, Tensor] = {}
        for block in ("self", "cross"):
            for name in ("q", "k", "v", "o"):
                w = he_normal(rng, (dim, dim), dim, gain=1.0) * init_scale
                if name == "o":
                    # zero-initialised residual branch: the block starts as the identity
                    w = np.zeros((dim, dim))
                self.params[f"{block}.{name}"] = Tensor(w, requires_grad=True)
        self.last_attention: dict[str, np.ndarray] = {}

    def _attend(self, queries: Tensor, keys: Tensor, block: str) -> Tensor:
        p = self.params
        q = ops.matmul(queries, p[f"{block}.q"])
        k = ops.matmul(keys, p[f"{block}.k"])
        v = ops.matmul(keys, p[f"{block}.v"])
        scores = ops.div(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), np.sqrt(self.dim))
        attn = ops.softmax(scores, axis=-1)
        self.last_attention[block] = attn.data
        return ops.add(queries, ops.matmul(ops.matmul(attn, v), p[f"{block}.o"]))

    def __call__(self, f_first: Tensor, f_second: Tensor) -> tuple[Tensor, Tensor]:
        if f_first.shape != f_second.shape:
            raise DimensionError(f"transformer inputs differ: {f_first.shape} vs {f_second.shape}")
        D, h, w = f_first.shape
        if D != self.dim:
            raise DimensionError(f"transformer built for D={self.dim}, got {D}")
        pe = positional_encoding(w, D)[None, None]
        # 2×h×w×D, both views batched
        x = ops.transpose(ops.concat([ops.reshape(f_first, (1, D, h, w)),
                                      ops.reshape(f_second, (1, D, h, w))], axis=0), (0, 2, 3, 1))
        x = ops.add(x, pe)
        x = self._attend(x, x, "self")
        swapped = ops.take(x, np.array([1, 0]), axis=0)
        x = self._attend(x, swapped, "cross")
        out = ops.transpose(x, (0, 3, 1, 2))
        return ops.reshape(out[0], (D, h, w)), ops.reshape(out[1], (D, h, w))


# -------------------------------------------------------- global coarse match

def _rows(f: Tensor) -> Tensor:
    """D×h×w → h×w×D."""
    return ops.transpose(f, (1, 2, 0))


def correlation_volume(F_first: Tensor, F_second: Tensor) -> Tensor:
    """Per-row correlation ``h×w×w`` scaled by 1/sqrt(D)."""
    if F_first.shape != F_second.shape:
        raise DimensionError(f"correlation inputs differ: {F_first.shape} vs {F_second.shape}")
    D = F_first.shape[0]
    second = ops.transpose(F_second, (1, 0, 2))  # h×D×w
    return ops.div(ops.matmul(_rows(F_first), second), np.sqrt(D))


def coarse_disparity(volume: Tensor) -> tuple[DisparityField, MatchingDistribution]:
    if volume.ndim != 3 or volume.shape[1] != volume.shape[2]:
        raise DimensionError(f"expected an h×w×w volume, got {volume.shape}")
    w = volume.shape[-1]
    grid = np.arange(w, dtype=np.float64)
    weights = ops.softmax(volume, axis=-1)
    expected = ops.reshape(ops.matmul(weights, grid[:, None]), volume.shape[:2])
    d = ops.relu(ops.sub(expected, grid[None, :]))
    return DisparityField(d, 1 / 8, "coarse"), MatchingDistribution(volume, weights, grid, expected)


# ---------------------------------------------------------- validity masking

def nn_feature_distance(f: Tensor) -> NeighborDistance:
    """Distance from each unit-normalised feature to its most cosine-similar other feature."""
    D, h, w = f.shape
    n = h * w
    if n < 2:
        raise ContractError("nearest-neighbour distance needs at least two features")
    x = ops.transpose(ops.reshape(f, (D, n)), (1, 0))
    sq = ops.sum(ops.mul(x, x), axis=1, keepdims=True)
    degenerate = sq.data[:, 0] < _NORM_EPS ** 2
    unit = ops.div(x, ops.sqrt(ops.clip(sq, _NORM_EPS ** 2, None)))
    sim = unit.data @ unit.data.T
    np.fill_diagonal(sim, -np.inf)
    neighbor = np.argmax(sim, axis=1)
    diff = ops.sub(unit, ops.take(unit, neighbor, axis=0))
    d2 = ops.sum(ops.mul(diff, diff), axis=1)
    # sqrt is kept off zero so duplicate features stay differentiable
    dist = ops.sqrt(ops.clip(d2, 1e-30, None))
    return NeighborDistance(ops.reshape(dist, (h, w)), neighbor, degenerate.reshape(h, w))


def disparity_mask(distance, zeta: float = DEFAULT_ZETA) -> ValidityMask:
    p = distance.data if isinstance(distance, Tensor) else np.asarray(distance, dtype=np.float64)
    return ValidityMask(p, p > zeta, zeta)


def masked_disparity(d: DisparityField, mask: ValidityMask) -> DisparityField:
    if mask.mask.shape != d.values.shape:
        raise DimensionError(f"mask {mask.mask.shape} does not match disparity {d.values.shape}")
    return DisparityField(ops.mul(d.values, mask.mask.astype(np.float64)), d.scale, "masked")


def propagate_disparity(f: Tensor, d_masked: DisparityField) -> DisparityField:
    """Self-similarity attention over all positions, applied to the masked disparity."""
    D, h, w = f.shape
    if d_masked.values.shape != (h, w):
        raise DimensionError(f"disparity {d_masked.values.shape} does not match features {(h, w)}")
    x = ops.transpose(ops.reshape(f, (D, h * w)), (1, 0))
    attn = ops.softmax(ops.div(ops.matmul(x, ops.transpose(x, (1, 0))), np.sqrt(D)), axis=-1)
    out = ops.matmul(attn, ops.reshape(d_masked.values, (h * w, 1)))
    return DisparityField(ops.reshape(out, (h, w)), d_masked.scale, "global")


# ---------------------------------------------------------------- refinement

def local_correlation(F_first: Tensor, F_second: Tensor, radius: int,
                      valid_second: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Correlation against columns ``x-radius .. x+radius`` of the second map: ``h×w×(2r+1)``.

    Candidates outside the map, or flagged false in ``valid_second`` (``h×w``),
    get a large negative score.
    """
    D, h, w = F_first.shape
    full = correlation_volume(F_first, F_second)  # h×w×w
    offsets = np.arange(-radius, radius + 1)
    cols = np.arange(w)[:, None] + offsets[None, :]
    clipped = np.clip(cols, 0, w - 1)
    inside = np.broadcast_to((cols >= 0) & (cols < w), (h, w, offsets.size))
    if valid_second is not None:
        inside = inside & np.asarray(valid_second, dtype=bool)[:, clipped]
    flat_idx = np.arange(w)[:, None] * w + clipped
    band = ops.take(ops.reshape(full, (h, w * w)), flat_idx, axis=1)
    band = ops.add(band, np.where(inside, 0.0, _OUT_OF_RANGE))
    return band, offsets.astype(np.float64)


@dataclass
class Refinement:
    upsampled: DisparityField
    residual: Tensor
    mask: ValidityMask
    refined: DisparityField


def refine_disparity(d_global: DisparityField, fine_first: Tensor, fine_second: Tensor,
                     transformer: EpipolarTransformer, zeta: float = DEFAULT_ZETA,
                     radius: int = REFINE_RADIUS) -> Refinement:
    h, w = d_global.values.shape
    if fine_first.shape[1:] != (2 * h, 2 * w) or fine_second.shape != fine_first.shape:
        raise ContractError(f"fine maps {fine_first.shape[1:]} are not twice the coarse grid {(h, w)}")
    up = ops.mul(ops.upsample_bilinear2x(d_global.values), 2.0)
    up_field = DisparityField(up, 1 / 4, "upsampled")
    warped, _ = ops.bilinear_warp_1d(fine_second, up, direction=1)
    F_first, F_warped = transformer(fine_first, warped)
    band, offsets = local_correlation(F_first, F_warped, radius)
    prob = ops.softmax(band, axis=-1)
    residual = ops.sum(ops.mul(prob, offsets), axis=-1)
    mask = disparity_mask(nn_feature_distance(fine_first).distance, zeta)
    residual = ops.mul(residual, mask.mask.astype(np.float64))
    refined = ops.relu(ops.add(up, residual))
    return Refinement(up_field, residual, mask, DisparityField(refined, 1 / 4, "refined"))


# ---------------------------------------------------------- convex upsampling

class ConvexUpsampler:
    """Two 3×3 convolutions predicting 9-way convex weights per output pixel."""

    def __init__(self, dim: int, factor: int = UPSAMPLE_FACTOR, hidden: int = 64,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.factor = factor
        out = 9 * factor * factor
        self.params = {
            "w1": Tensor(he_normal(rng, (hidden, dim, 3, 3), dim * 9), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(he_normal(rng, (out, hidden, 3, 3), hidden * 9, gain=0.1), requires_grad=True),
            "b2": Tensor(np.zeros(out), requires_grad=True),
        }

    def weights(self, features: Tensor) -> Tensor:
        """Softmax weights ``9×s×s×h×w`` over the 3×3 source neighbourhood."""
        p = self.params
        hid = ops.relu(ops.conv2d(features, p["w1"], p["b1"], padding=1))
        logits = ops.conv2d(hid, p["w2"], p["b2"], padding=1)
        s = self.factor
        _, h, w = logits.shape
        return ops.softmax(ops.reshape(logits, (9, s, s, h, w)), axis=0)


def neighborhood_index(h: int, w: int) -> np.ndarray:
    """Flat indices of the edge-clamped 3×3 neighbourhood, shape ``9×h×w`` (centre is 4)."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    idx = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            idx.append(np.clip(ys + dy, 0, h - 1) * w + np.clip(xs + dx, 0, w - 1))
    return np.stack(idx)


def convex_combine(d: Tensor, weights: Tensor, factor: int) -> Tensor:
    """Apply ``9×s×s×h×w`` convex weights to ``factor``-scaled neighbourhoods of ``d``."""
    h, w = d.shape
    s = factor
    nb = ops.take(ops.reshape(ops.mul(d, float(s)), (h * w,)), neighborhood_index(h, w), axis=0)
    up = ops.sum(ops.mul(weights, ops.reshape(nb, (9, 1, 1, h, w))), axis=0)  # s×s×h×w
    return ops.reshape(ops.transpose(up, (2, 0, 3, 1)), (h * s, w * s))


def convex_upsample(d_refined: DisparityField, fine_first: Tensor, upsampler: ConvexUpsampler) -> DisparityField:
    weights = upsampler.weights(fine_first)
    full = convex_combine(d_refined.values, weights, upsampler.factor)
    return DisparityField(full, 1.0, "full")


# --------------------------------------------------------------- composition

@dataclass
class MatcherParams:
    coarse_transformer: EpipolarTransformer
    fine_transformer: EpipolarTransformer
    upsampler: ConvexUpsampler
    zeta: float = DEFAULT_ZETA
    radius: int = REFINE_RADIUS

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, zeta: float = DEFAULT_ZETA,
               radius: int = REFINE_RADIUS) -> "MatcherParams":
        return cls(EpipolarTransformer(dim, rng), EpipolarTransformer(dim, rng),
                   ConvexUpsampler(dim, rng=rng), zeta, radius)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in (("coarse_tf", self.coarse_transformer), ("fine_tf", self.fine_transformer),
                            ("upsampler", self.upsampler)):
            out.update({f"{prefix}.{k}": v for k, v in mod.params.items()})
        return out


@dataclass
class StereoMatch:
    disparity: DisparityField            # full resolution
    mask: ValidityMask                   # coarse-stage mask
    mask_full: np.ndarray                # coarse mask, nearest-upsampled to full size
    stages: dict[str, DisparityField] = field(default_factory=dict)
    distribution: MatchingDistribution | None = None
    neighbor_distance: NeighborDistance | None = None
    refinement: Refinement | None = None


def match_stereo(first: FeaturePyramid, second: FeaturePyramid, params: MatcherParams) -> StereoMatch:
    if first.coarse.shape != second.coarse.shape or first.fine.shape != second.fine.shape:
        raise DimensionError("pyramids must share shapes")
    F1, F2 = params.coarse_transformer(first.coarse, second.coarse)
    d_c, dist = coarse_disparity(correlation_volume(F1, F2))
    nn = nn_feature_distance(first.coarse)
    mask = disparity_mask(nn.distance, params.zeta)
    d_m = masked_disparity(d_c, mask)
    d_g = propagate_disparity(first.coarse, d_m)
    ref = refine_disparity(d_g, first.fine, second.fine, params.fine_transformer, params.zeta, params.radius)
    full = convex_upsample(ref.refined, first.fine, params.upsampler)
    scale = full.values.shape[0] // mask.mask.shape[0]
    mask_full = np.repeat(np.repeat(mask.mask, scale, axis=0), scale, axis=1)
    stages = {"coarse": d_c, "masked": d_m, "global": d_g, "upsampled": ref.upsampled,
              "refined": ref.refined, "output": ref.refined, "full": full}
    return StereoMatch(full, mask, mask_full, stages, dist, nn, ref)
