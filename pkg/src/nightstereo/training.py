"""Training loop, checkpoints, evaluation and inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, container, imageio
from .config import RunConfig, load as load_config
from .diffmath import AdamState, Tape, Tensor, adam_step, backward, no_tape
from .errors import ConfigurationError, ContractError, TrainingStepError, VersionError
from .features import load_provider_pair
from .losses import (LossConfig, disparity_to_depth, distance_regularizer, photometric_loss,
                     smoothness_loss, total_loss)
from .matcher import nn_feature_distance
from .metrics import MetricReport, combine_reports, evaluate_depth
from .model import Forward, StereoModel, provider_features

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
TRACE_FIELDS = ("step", "total", "photo", "reg", "smooth")


def loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(alpha=cfg.alpha, gamma=cfg.gamma, beta1=cfg.beta1, beta2=cfg.beta2)


def _chw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image, dtype=np.float64).transpose(2, 0, 1))


@dataclass
class StepLoss:
    total: Tensor
    photo: float
    reg: float
    smooth: float
    forward: Forward | None = None


def item_loss(model: StereoModel, item, cfg: LossConfig, root: Path | None = None) -> StepLoss:
    """Self-supervised objective for one stereo pair."""
    fwd = model(*provider_features(model, item, root))
    disparity = fwd.match.disparity.values
    photo = photometric_loss(_chw(item.left), _chw(item.right), disparity, cfg)
    reg_first = distance_regularizer(fwd.match.neighbor_distance.distance, cfg)
    reg_second = distance_regularizer(nn_feature_distance(fwd.second.coarse).distance, cfg)
    reg = (reg_first + reg_second) * 0.5
    smooth = smoothness_loss(disparity, _chw(item.left))
    total = total_loss(photo, reg, smooth, cfg)
    return StepLoss(total, float(photo.data), float(reg.data), float(smooth.data), fwd)


def batch_loss(model: StereoModel, items: Sequence, cfg: LossConfig, root: Path | None = None) -> StepLoss:
    parts = [item_loss(model, it, cfg, root) for it in items]
    total = parts[0].total
    for p in parts[1:]:
        total = total + p.total
    n = float(len(parts))
    return StepLoss(total / n, sum(p.photo for p in parts) / n, sum(p.reg for p in parts) / n,
                    sum(p.smooth for p in parts) / n)


def step_batch(cfg: RunConfig, step: int, n_items: int) -> np.ndarray:
    """Batch indices depend only on (seed, step), so resuming needs no RNG state."""
    rng = np.random.default_rng([cfg.seed, step])
    return rng.choice(n_items, size=min(cfg.batch, n_items), replace=False)


def total_steps(cfg: RunConfig, n_items: int) -> int:
    if cfg.epochs > 0:
        return cfg.epochs * math.ceil(n_items / cfg.batch)
    return cfg.steps


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: StereoModel, cfg: RunConfig, state: AdamState | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    container.write(path / "params.nslt", {k: v.data for k, v in params.items()})
    if state is not None:
        slots = {"step": np.array([state.step], dtype=np.float64), "lr": np.array([state.lr])}
        slots.update({f"m.{k}": v for k, v in state.m.items()})
        slots.update({f"v.{k}": v for k, v in state.v.items()})
        container.write(path / "optim.nslt", slots)
    cfg.save(path / "config.txt")
    lines = [f"format={CHECKPOINT_FORMAT}", f"config_hash={cfg.model_hash()}",
             f"raw_channels={model.head.in_channels}"]
    lines += [f"param {k} {'x'.join(map(str, v.shape))}" for k, v in params.items()]
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def _read_manifest(path: Path) -> dict:
    info = {"params": {}}
    for line in (path / "manifest.txt").read_text().splitlines():
        if line.startswith("param "):
            _, name, shape = line.split()
            info["params"][name] = tuple(int(s) for s in shape.split("x"))
        elif "=" in line:
            key, val = line.split("=", 1)
            info[key] = val
    return info


def load_checkpoint(path, expected: RunConfig | None = None) -> tuple[StereoModel, RunConfig, AdamState | None]:
    """Rebuild a model from ``path``; ``expected`` must agree on every shape-relevant field."""
    path = Path(path)
    if not (path / "manifest.txt").exists():
        raise VersionError(f"{path}: not a checkpoint directory (no manifest.txt)")
    info = _read_manifest(path)
    if int(info.get("format", -1)) != CHECKPOINT_FORMAT:
        raise VersionError(f"{path}: checkpoint format {info.get('format')} != {CHECKPOINT_FORMAT}")
    cfg = load_config(path / "config.txt")
    if cfg.model_hash() != info.get("config_hash"):
        raise VersionError(f"{path}: config.txt does not match the manifest hash")
    if expected is not None and expected.model_hash() != cfg.model_hash():
        raise VersionError(f"{path}: checkpoint was built for a different model configuration")
    model = StereoModel.create(cfg, raw_channels=int(info["raw_channels"]))
    params = model.parameters()
    stored = container.read(path / "params.nslt")
    if set(stored) != set(params) or any(params[k].shape != info["params"][k] for k in params):
        raise VersionError(f"{path}: parameter set or shapes differ from the configured model")
    for k, p in params.items():
        p.data[...] = stored[k]
    state = None
    if (path / "optim.nslt").exists():
        slots = container.read(path / "optim.nslt")
        state = AdamState(lr=float(slots["lr"][0]), step=int(slots["step"][0]))
        state.m = {k[2:]: v for k, v in slots.items() if k.startswith("m.")}
        state.v = {k[2:]: v for k, v in slots.items() if k.startswith("v.")}
    return model, cfg, state


# ------------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: StereoModel
    state: AdamState
    trace: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def _write_trace(path: Path, trace: list[dict], append: bool) -> None:
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(TRACE_FIELDS)
        for row in trace:
            writer.writerow([row["step"]] + [repr(row[k]) for k in TRACE_FIELDS[1:]])


def train(cfg: RunConfig, items: Sequence, root: Path | None = None, out: Path | None = None,
          resume: Path | None = None, max_steps: int | None = None) -> TrainResult:
    """Optimise every model parameter with Adam on the total self-supervised loss.

    ``max_steps`` stops early (used to take a single step after resuming).
    """
    if len(items) == 0:
        raise ConfigurationError("training needs a non-empty dataset")
    for it in items:
        if it.left.shape[:2] != (cfg.height, cfg.width):
            raise ConfigurationError(f"{it.name}: image is {it.left.shape[:2]}, config says {(cfg.height, cfg.width)}")
    if resume is not None:
        model, _, state = load_checkpoint(resume, expected=cfg)
        state = state or AdamState(lr=cfg.lr)
    else:
        raw_channels = None
        if cfg.encoder == "files":
            if root is None:
                raise ConfigurationError("the file provider needs a dataset root")
            raw_channels = load_provider_pair(Path(root), items[0].name, items[0].left.shape[:2])[0].channels
        model = StereoModel.create(cfg, raw_channels)
        state = AdamState(lr=cfg.lr)
    lcfg = loss_config(cfg)
    params = model.parameters()
    steps = total_steps(cfg, len(items))
    end = steps if max_steps is None else min(steps, state.step + max_steps)
    result = TrainResult(model, state)
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    while state.step < end:
        step = state.step
        batch = [items[i] for i in step_batch(cfg, step, len(items))]
        with Tape() as tape:
            try:
                loss = batch_loss(model, batch, lcfg, root)
            except TrainingStepError:
                if out is not None:
                    save_checkpoint(out / "checkpoint", model, cfg, state)
                raise
        grads = backward(loss.total, tape)
        named = {k: grads[p] for k, p in params.items()}
        bad = [k for k, g in named.items() if not np.all(np.isfinite(g))]
        if bad:
            if out is not None:
                save_checkpoint(out / "checkpoint", model, cfg, state)
            raise TrainingStepError(f"non-finite gradients at step {step}", {"params": ", ".join(bad)})
        adam_step(params, named, state)
        for p in params.values():
            p.grad = None
        row = {"step": step + 1, "total": float(loss.total.data), "photo": loss.photo, "reg": loss.reg,
               "smooth": loss.smooth}
        result.trace.append(row)
        if (step + 1) % cfg.log_every == 0 or step == 0:
            log.info("step %d total %.5f photo %.5f reg %.5f smooth %.5f", step + 1, row["total"],
                     row["photo"], row["reg"], row["smooth"])

    if out is not None:
        result.checkpoint = save_checkpoint(out / "checkpoint", model, cfg, state)
        _write_trace(out / "loss_trace.csv", result.trace, append=resume is not None)
    return result


# --------------------------------------------------------- evaluation / infer

def predict(model: StereoModel, item, root: Path | None = None) -> Forward:
    with no_tape():
        return model(*provider_features(model, item, root))


@dataclass
class Evaluation:
    report: MetricReport
    epe: float                  # mean end-point error over gt-valid pixels, full resolution
    epe_fraction: float         # share of gt-valid pixels with EPE below ``epe_threshold``
    epe_threshold: float
    images: int


def end_point_error(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(pred) - np.asarray(gt))[valid]


def evaluate(model: StereoModel, items: Sequence, cfg: RunConfig, root: Path | None = None,
             epe_threshold: float = 0.75) -> Evaluation:
    reports, errors = [], []
    for item in items:
        if item.gt is None and item.disparity is None:
            continue
        disparity = predict(model, item, root).match.disparity.values.data
        if item.gt is not None:
            depth, ok = disparity_to_depth(disparity, item.rig)
            reports.append(evaluate_depth(depth, item.gt, cfg.bins, cfg.max_depth, pred_valid=ok))
        if item.disparity is not None and item.valid is not None:
            errors.append(end_point_error(disparity, item.disparity, item.valid))
    if not reports and not errors:
        raise ContractError("no items with ground truth to evaluate")
    epe = np.concatenate(errors) if errors else np.array([])
    report = combine_reports(reports)
    return Evaluation(report, float(epe.mean()) if epe.size else float("nan"),
                      float((epe < epe_threshold).mean()) if epe.size else float("nan"), epe_threshold,
                      len(reports))


def infer(model: StereoModel, item, outdir, root: Path | None = None) -> dict[str, Path]:
    """Write ``<name>.pfm``, ``<name>_disp.png`` (disparity × 256) and ``<name>_mask.png``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    match = predict(model, item, root).match
    disparity = match.disparity.values.data
    paths = {"pfm": outdir / f"{item.name}.pfm", "png": outdir / f"{item.name}_disp.png",
             "mask": outdir / f"{item.name}_mask.png"}
    imageio.write_pfm(paths["pfm"], disparity)
    imageio.write_png16(paths["png"], disparity, imageio.PNG_DISPARITY_SCALE)
    imageio.write_mask(paths["mask"], match.mask_full)
    return paths


def run_manifest(cfg: RunConfig, extra: dict | None = None) -> str:
    """Reproducibility record: package version, seed, config. No timestamps, so reruns match bitwise."""
    lines = [f"version={__version__}", f"seed={cfg.seed}", f"config_hash={cfg.model_hash()}"]
    lines += [f"{k}={v}" for k, v in sorted((extra or {}).items())]
    return "\n".join(lines) + "\n# config\n" + cfg.dumps()
