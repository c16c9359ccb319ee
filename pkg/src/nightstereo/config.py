"""Run configuration: a flat dataclass mirrored by plain ``key=value`` files."""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigurationError, FormatError

SEED_ENV = "NSL_SEED"

# Fields that determine parameter shapes or forward semantics; a checkpoint is
# only usable under a config that agrees on all of them.
MODEL_FIELDS = ("encoder", "height", "width", "dim", "zeta", "radius", "hidden")


@dataclass(frozen=True)
class RunConfig:
    command: str = "train"
    dataset: str = ""
    out: str = "runs/default"
    checkpoint: str = ""
    encoder: str = "toy"          # toy | files
    height: int = 64
    width: int = 96
    dim: int = 128
    hidden: int = 64              # convex-upsampler hidden width
    zeta: float = 0.2
    radius: int = 8
    gamma: float = 2.0
    alpha: float = 0.15
    beta1: float = 1.0
    beta2: float = 0.1
    lr: float = 1e-4
    batch: int = 2
    steps: int = 300
    epochs: int = 0               # > 0 overrides steps with epochs × ceil(N / batch)
    bins: int = 10
    max_depth: float = 50.0
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.encoder not in ("toy", "files"):
            raise ConfigurationError(f"encoder must be 'toy' or 'files', got {self.encoder!r}")
        if self.height <= 0 or self.width <= 0 or self.height % 8 or self.width % 8:
            raise ConfigurationError(f"image size {self.height}×{self.width} must be positive multiples of 8")
        positive = {"dim": self.dim, "hidden": self.hidden, "radius": self.radius, "lr": self.lr,
                    "batch": self.batch, "bins": self.bins, "max_depth": self.max_depth}
        bad = [k for k, v in positive.items() if not v > 0]
        if bad:
            raise ConfigurationError(f"must be positive: {', '.join(bad)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.zeta <= 2.0:
            raise ConfigurationError(f"zeta must lie in [0, 2], got {self.zeta}")
        if min(self.gamma, self.beta1, self.beta2) < 0 or self.steps < 0 or self.epochs < 0 or self.seed < 0:
            raise ConfigurationError("gamma, beta1, beta2, steps, epochs and seed must be non-negative")
        if self.log_every < 1:
            raise ConfigurationError("log_every must be at least 1")

    def model_hash(self) -> str:
        text = "\n".join(f"{k}={getattr(self, k)!r}" for k in MODEL_FIELDS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def dumps(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in asdict(self).items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def paper_recipe(**overrides) -> RunConfig:
    """Full-scale schedule: batch 8, 20 epochs, 192×320 inputs, lr 1e-4."""
    return RunConfig(**{"batch": 8, "epochs": 20, "height": 192, "width": 320, **overrides})


def _format(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(name: str, kind: type, text: str):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"{name}: cannot parse {text!r} as {kind.__name__}") from exc


_TYPES = {f.name: {"int": int, "float": float, "str": str}[f.type] for f in fields(RunConfig)}


def parse_pairs(pairs: dict[str, str]) -> dict:
    out = {}
    for key, text in pairs.items():
        name = key.replace("-", "_")
        if name not in _TYPES:
            raise ConfigurationError(f"unknown config key {key!r}")
        out[name] = _coerce(name, _TYPES[name], text)
    return out


def loads(text: str, source: str = "<config>") -> dict:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return parse_pairs(pairs)


def load(path) -> RunConfig:
    return RunConfig(**loads(Path(path).read_text(), str(path)))


def resolve(file: str | None = None, overrides: dict | None = None, env=None,
            base: RunConfig | None = None) -> RunConfig:
    """Defaults (or ``base``) < config file < explicit overrides < ``NSL_SEED``."""
    env = os.environ if env is None else env
    values = asdict(base) if base is not None else {}
    if file:
        values.update(loads(Path(file).read_text(), file))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if env.get(SEED_ENV):
        values["seed"] = _coerce("seed", int, env[SEED_ENV])
    return RunConfig(**values)


def with_updates(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **changes)
