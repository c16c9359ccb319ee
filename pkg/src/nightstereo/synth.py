"""Synthetic rectified stereo scenes with exact disparity, and a folder dataset loader.

Convention: a left pixel at column ``x`` shows the same surface point as the
right pixel at ``x + d``, i.e. ``left(x) == right(x + d)``. This is the
orientation the matcher's ``ReLU(G - P)`` disparity assumes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imageio
from .errors import ConfigurationError, FormatError
from .features import save_feature_tensor
from .losses import StereoRig, depth_to_disparity, disparity_to_depth
from .metrics import GroundTruthDepth

log = logging.getLogger(__name__)

TEXTURES = ("random-dot", "gradient", "flat-noise")
DEFAULT_RIG = StereoRig(baseline=0.5, focal=200.0)
SKY_LEVEL = 0.08
SKY_NOISE = 0.03


@dataclass(frozen=True)
class Layer:
    disparity: float
    texture: str
    rect: tuple[int, int, int, int]   # y0, x0, y1, x1 in left-image pixels, end-exclusive


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    layers: tuple[Layer, ...]
    noise: float = 0.0
    gain: float = 1.0
    offset: float = 0.0
    seed: int = 0
    dot_blur: float = 2.0

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ConfigurationError(f"image size must be positive, got {self.height}×{self.width}")
        if not self.layers:
            raise ConfigurationError("a scene needs at least one layer")
        for layer in self.layers:
            if layer.texture not in TEXTURES:
                raise ConfigurationError(f"unknown texture kind {layer.texture!r}")
            if not 0.0 <= layer.disparity <= self.width / 4:
                raise ConfigurationError(f"disparity {layer.disparity} outside [0, W/4 = {self.width / 4}]")
            y0, x0, y1, x1 = layer.rect
            if not (0 <= y0 < y1 <= self.height and 0 <= x0 < x1 <= self.width):
                raise ConfigurationError(f"layer region {layer.rect} is empty or out of bounds")
        if self.noise < 0 or self.gain <= 0:
            raise ConfigurationError("noise must be >= 0 and gain > 0")


@dataclass
class DatasetItem:
    name: str
    left: np.ndarray                      # H×W×3 in [0, 1]
    right: np.ndarray
    rig: StereoRig
    gt: GroundTruthDepth | None = None
    disparity: np.ndarray | None = None   # dense gt disparity, full-resolution pixels
    valid: np.ndarray | None = None       # gt disparity validity (occlusion, sky, out-of-view)
    textured: np.ndarray | None = None    # pixels belonging to textured (non-sky) layers
    left_ids: np.ndarray | None = None
    right_ids: np.ndarray | None = None
    spec: SceneSpec | None = None

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ConfigurationError(f"left/right sizes differ: {self.left.shape} vs {self.right.shape}")


def _texture(rng: np.random.Generator, kind: str, height: int, span: int, blur: float) -> np.ndarray:
    if kind == "random-dot":
        dots = rng.uniform(0.0, 1.0, size=(height, span, 3))
        if blur > 0:
            dots = gaussian_filter(dots, sigma=(blur, blur, 0), mode="wrap")
        dots = (dots - dots.mean()) / (dots.std() + 1e-12)
        return np.clip(0.5 + 0.2 * dots, 0.0, 1.0)
    if kind == "gradient":
        ramp = np.linspace(0.15, 0.85, span)[None, :, None]
        tint = rng.uniform(0.7, 1.0, size=(1, 1, 3))
        detail = gaussian_filter(rng.normal(size=(height, span, 3)), sigma=(1.5, 1.5, 0), mode="wrap")
        return np.clip(ramp * tint + 0.05 * detail, 0.0, 1.0)
    # flat-noise: constant level; per-view noise is added at render time
    return np.full((height, span, 3), SKY_LEVEL)


def _sample_rows(tex: np.ndarray, u: np.ndarray, u_min: int) -> np.ndarray:
    """Linear interpolation of ``tex`` (H×U×3) at fractional texture columns ``u`` (H×W)."""
    pos = u - u_min
    i0 = np.floor(pos).astype(int)
    t = (pos - i0)[..., None]
    i0 = np.clip(i0, 0, tex.shape[1] - 1)
    i1 = np.clip(i0 + 1, 0, tex.shape[1] - 1)
    rows = np.arange(tex.shape[0])[:, None]
    return (1.0 - t) * tex[rows, i0] + t * tex[rows, i1]


def gen_scene(spec: SceneSpec, rig: StereoRig = DEFAULT_RIG, name: str = "scene") -> DatasetItem:
    spec.validate()
    H, W = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)
    u_min = -int(np.ceil(W / 4)) - 2
    span = W - u_min + 3

    order = sorted(range(len(spec.layers)), key=lambda k: (spec.layers[k].disparity, k))
    left = np.zeros((H, W, 3))
    right = np.zeros((H, W, 3))
    left_ids = np.full((H, W), -1)
    right_ids = np.full((H, W), -1)
    xs = np.broadcast_to(np.arange(W, dtype=np.float64), (H, W))
    ys = np.broadcast_to(np.arange(H)[:, None], (H, W))

    textures = [_texture(rng, layer.texture, H, span, spec.dot_blur) for layer in spec.layers]
    for k in order:
        layer = spec.layers[k]
        y0, x0, y1, x1 = layer.rect
        # regions touching the frame continue beyond it, so the right view has no holes
        lo = -np.inf if x0 == 0 else x0
        hi = np.inf if x1 == W else x1
        rows = (ys >= y0) & (ys < y1)
        in_left = rows & (xs >= lo) & (xs < hi)
        u_right = xs - layer.disparity
        in_right = rows & (u_right >= lo) & (u_right < hi)
        tex = textures[k]
        if layer.texture == "flat-noise":
            lval = tex[:, :W] + SKY_NOISE * rng.normal(size=(H, W, 3))
            rval = tex[:, :W] + SKY_NOISE * rng.normal(size=(H, W, 3))
        else:
            lval = _sample_rows(tex, xs, u_min)
            rval = _sample_rows(tex, u_right, u_min)
        left[in_left] = lval[in_left]
        right[in_right] = rval[in_right]
        left_ids[in_left] = k
        right_ids[in_right] = k

    if spec.noise > 0:
        left = left + spec.noise * rng.normal(size=left.shape)
        right = right + spec.noise * rng.normal(size=right.shape)
    right = right * spec.gain + spec.offset
    left = np.clip(left, 0.0, 1.0)
    right = np.clip(right, 0.0, 1.0)

    layer_disp = np.array([layer.disparity for layer in spec.layers])
    kinds = np.array([layer.texture for layer in spec.layers])
    disparity = np.where(left_ids >= 0, layer_disp[np.maximum(left_ids, 0)], 0.0)
    textured = (left_ids >= 0) & (kinds[np.maximum(left_ids, 0)] != "flat-noise")
    xr = xs + disparity
    inside = xr <= W - 1
    xa = np.clip(np.floor(xr).astype(int), 0, W - 1)
    xb = np.clip(np.ceil(xr).astype(int), 0, W - 1)
    visible = (right_ids[ys, xa] == left_ids) & (right_ids[ys, xb] == left_ids)
    valid = textured & inside & visible & (disparity > 0)
    depth, has_depth = disparity_to_depth(disparity, rig)
    gt = GroundTruthDepth(np.where(valid & has_depth, depth, 0.0))
    return DatasetItem(name, left, right, rig, gt, disparity, valid, textured, left_ids, right_ids, spec)


def random_scene_spec(seed: int, height: int = 64, width: int = 96, disparity_range=(2.0, 8.0),
                      foreground: int = 1, sky: bool = False, texture: str = "random-dot",
                      disparity_step: float = 0.0, noise: float = 0.0, gain: float = 1.0,
                      offset: float = 0.0, dot_blur: float = 2.0) -> SceneSpec:
    """A background plane plus ``foreground`` rectangles, optionally under a flat-noise sky band.

    With ``disparity_step > 0`` every disparity is a multiple of it.
    """
    rng = np.random.default_rng(seed)
    lo, hi = disparity_range

    def draw(lo=lo):
        d = rng.uniform(lo, hi)
        if disparity_step > 0:
            d = float(np.clip(np.round(d / disparity_step) * disparity_step, lo, hi))
        return float(d)

    top = height // 3 if sky else 0
    layers = []
    if sky:
        layers.append(Layer(0.0, "flat-noise", (0, 0, top, width)))
    back = draw()
    layers.append(Layer(back, texture, (top, 0, height, width)))
    for _ in range(foreground):
        h = int(rng.integers(max(4, (height - top) // 4), max(5, (height - top) // 2) + 1))
        w = int(rng.integers(max(4, width // 6), max(5, width // 3) + 1))
        y0 = int(rng.integers(top, height - h + 1))
        x0 = int(rng.integers(0, width - w + 1))
        layers.append(Layer(draw(back), texture, (y0, x0, y0 + h, x0 + w)))
    return SceneSpec(height, width, tuple(layers), noise=noise, gain=gain, offset=offset,
                     seed=int(rng.integers(0, 2 ** 31)), dot_blur=dot_blur)


def scene_set(count: int, seed: int, **kwargs) -> list[DatasetItem]:
    seeds = np.random.default_rng(seed).integers(0, 2 ** 31, size=count)
    return [gen_scene(random_scene_spec(int(s), **kwargs), name=f"{i:04d}") for i, s in enumerate(seeds)]


@dataclass(frozen=True)
class ScenePlan:
    """A batch of scenes described by a ``key=value`` file.

    Explicit ``layer = disparity, texture, y0, x0, y1, x1`` lines fix the layout
    (only the texture seed varies per scene); otherwise layouts are drawn at random.
    """

    height: int = 64
    width: int = 96
    count: int = 8
    seed: int = 0
    disparity_min: float = 2.0
    disparity_max: float = 8.0
    disparity_step: float = 0.0
    foreground: int = 1
    sky: int = 0
    texture: str = "random-dot"
    noise: float = 0.0
    gain: float = 1.0
    offset: float = 0.0
    dot_blur: float = 2.0
    baseline_m: float = DEFAULT_RIG.baseline
    focal_px: float = DEFAULT_RIG.focal
    layers: tuple[Layer, ...] = ()


_PLAN_TYPES = {"height": int, "width": int, "count": int, "seed": int, "foreground": int, "sky": int,
               "texture": str}


def read_scene_plan(path) -> ScenePlan:
    values, layers = {}, []
    known = {f for f in ScenePlan.__dataclass_fields__ if f != "layers"}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, val = (t.strip() for t in line.split("=", 1))
        try:
            if key == "layer":
                d, tex, *rect = (t.strip() for t in val.split(","))
                if len(rect) != 4:
                    raise ValueError("layer needs disparity, texture and four rectangle bounds")
                layers.append(Layer(float(d), tex, tuple(int(r) for r in rect)))
            elif key in known:
                values[key] = _PLAN_TYPES.get(key, float)(val)
            else:
                raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    plan = ScenePlan(**values, layers=tuple(layers))
    if plan.count < 1:
        raise ConfigurationError("count must be at least 1")
    return plan


def render_plan(plan: ScenePlan) -> list[DatasetItem]:
    rig = StereoRig(plan.baseline_m, plan.focal_px, cx=plan.width / 2, cy=plan.height / 2)
    seeds = np.random.default_rng(plan.seed).integers(0, 2 ** 31, size=plan.count)
    items = []
    for i, s in enumerate(seeds):
        if plan.layers:
            spec = SceneSpec(plan.height, plan.width, plan.layers, plan.noise, plan.gain, plan.offset,
                             int(s), plan.dot_blur)
        else:
            spec = random_scene_spec(int(s), plan.height, plan.width, (plan.disparity_min, plan.disparity_max),
                                     plan.foreground, bool(plan.sky), plan.texture, plan.disparity_step,
                                     plan.noise, plan.gain, plan.offset, plan.dot_blur)
        items.append(gen_scene(spec, rig, name=f"{i:04d}"))
    return items


# ------------------------------------------------------------ oracle features

ORACLE_LAYERS = 8
ORACLE_SCALE = 30.0


def oracle_features(item: DatasetItem, scale: int, width_channels: int | None = None,
                    rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Left/right ``h×w×C`` maps encoding each cell's surface coordinate, row and layer.

    Exact correspondences require disparities that are multiples of ``scale``.
    Flat-noise cells get independent random directions in each view.
    """
    H, W = item.left.shape[:2]
    h, w = H // scale, W // scale
    rng = rng or np.random.default_rng(0)
    u_min = -(W // 4) // 4 - 1   # in fine-grid units, shared by both scales
    n_u = width_channels or (W // 4 - u_min + 1)
    n_rows = H // 4
    C = n_u + n_rows + ORACLE_LAYERS
    layer_disp = np.array([layer.disparity for layer in item.spec.layers])
    kinds = [layer.texture for layer in item.spec.layers]
    out = []
    for ids, sign in ((item.left_ids, 0.0), (item.right_ids, 1.0)):
        f = np.zeros((h, w, C))
        for y in range(h):
            for x in range(w):
                k = ids[y * scale, x * scale]
                if k < 0 or kinds[k] == "flat-noise":
                    v = rng.normal(size=C)
                    f[y, x] = ORACLE_SCALE * v / np.linalg.norm(v)
                    continue
                u = int(round((x * scale - sign * layer_disp[k]) / scale)) - u_min
                f[y, x, int(np.clip(u, 0, n_u - 1))] = 1.0
                f[y, x, n_u + y] = 1.0
                f[y, x, n_u + n_rows + k] = 1.0
                f[y, x] *= ORACLE_SCALE / np.sqrt(3.0)
        out.append(f)
    return out[0], out[1]


def oracle_channels(height: int, width: int) -> int:
    u_min = -(width // 4) // 4 - 1
    return (width // 4 - u_min + 1) + height // 4 + ORACLE_LAYERS


# --------------------------------------------------------------- folder IO

def write_calib(path, rig: StereoRig) -> None:
    Path(path).write_text(f"baseline_m={rig.baseline!r}\nfocal_px={rig.focal!r}\ncx={rig.cx!r}\ncy={rig.cy!r}\n")


def read_calib(path) -> StereoRig:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = float(val)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {key} is not a number") from exc
    missing = {"baseline_m", "focal_px"} - values.keys()
    if missing:
        raise FormatError(f"{path}: missing keys {sorted(missing)}")
    try:
        return StereoRig(values["baseline_m"], values["focal_px"], values.get("cx", 0.0), values.get("cy", 0.0))
    except ConfigurationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_dataset(items: Sequence[DatasetItem], root, oracle: bool = False) -> None:
    """Write ``left/ right/ gt/ disp/`` folders plus ``calib.txt`` (and oracle features on request)."""
    root = Path(root)
    for sub in ("left", "right", "gt", "disp"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if oracle:
        (root / "features" / "left").mkdir(parents=True, exist_ok=True)
        (root / "features" / "right").mkdir(parents=True, exist_ok=True)
    for item in items:
        imageio.write_rgb(root / "left" / f"{item.name}.png", item.left)
        imageio.write_rgb(root / "right" / f"{item.name}.png", item.right)
        if item.gt is not None:
            imageio.write_png16(root / "gt" / f"{item.name}.png", item.gt.values, imageio.PNG_DEPTH_SCALE)
        if item.disparity is not None:
            imageio.write_pfm(root / "disp" / f"{item.name}.pfm", np.where(item.valid, item.disparity, 0.0))
        if oracle:
            rng = np.random.default_rng(int(item.spec.seed) if item.spec else 0)
            fl, fr = oracle_features(item, 4, rng=rng)
            cl, cr = oracle_features(item, 8, width_channels=None, rng=rng)
            save_feature_tensor(root / "features" / "left" / f"{item.name}.nslt", fl, cl)
            save_feature_tensor(root / "features" / "right" / f"{item.name}.nslt", fr, cr)
    if items:
        write_calib(root / "calib.txt", items[0].rig)


@dataclass
class FolderDataset:
    """Lazily loaded ``root/{left,right,gt?,disp?}/NNNN.png`` dataset in lexicographic order."""

    root: Path
    rig: StereoRig
    stems: list[str]
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.stems)

    def __iter__(self) -> Iterator[DatasetItem]:
        for i in range(len(self.stems)):
            yield self[i]

    def __getitem__(self, i: int) -> DatasetItem:
        stem = self.stems[i]
        left = imageio.read_rgb(self.root / "left" / f"{stem}.png")
        right = imageio.read_rgb(self.root / "right" / f"{stem}.png")
        gt = disparity = valid = None
        gt_path = self.root / "gt" / f"{stem}.png"
        if gt_path.exists():
            gt = GroundTruthDepth(imageio.read_png16(gt_path, imageio.PNG_DEPTH_SCALE))
        disp_path = self.root / "disp" / f"{stem}.pfm"
        if disp_path.exists():
            disparity = imageio.read_pfm(disp_path).astype(np.float64)
            valid = disparity > 0
        elif gt is not None:
            disparity, valid = depth_to_disparity(gt.values, self.rig)
        return DatasetItem(stem, left, right, self.rig, gt, disparity, valid, textured=valid)

    @property
    def has_features(self) -> bool:
        return (self.root / "features").is_dir()


def load_dataset(root) -> FolderDataset:
    root = Path(root)
    calib = root / "calib.txt"
    if not calib.exists():
        raise FormatError(f"{root}: missing calib.txt")
    rig = read_calib(calib)
    left = {p.stem for p in (root / "left").glob("*.png")}
    right = {p.stem for p in (root / "right").glob("*.png")}
    skipped = [f"left/{s}.png: no right counterpart" for s in sorted(left - right)]
    skipped += [f"right/{s}.png: no left counterpart" for s in sorted(right - left)]
    for entry in skipped:
        log.warning("skipping %s", entry)
    return FolderDataset(root, rig, sorted(left & right), skipped)
