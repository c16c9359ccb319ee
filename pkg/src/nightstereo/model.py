"""The trainable stereo network: feature provider, projection head and matcher."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diffmath import Tensor
from .errors import ConfigurationError, DimensionError
from .features import (TOY_CHANNELS, FeaturePyramid, ProjectionHead, RawFeatureMap, ToyEncoder,
                       load_provider_pair, project, toy_encoder)
from .matcher import ConvexUpsampler, EpipolarTransformer, MatcherParams, StereoMatch, match_stereo


@dataclass
class Forward:
    match: StereoMatch
    first: FeaturePyramid
    second: FeaturePyramid


class StereoModel:
    """Feature provider → shared projection head → matcher.

    With ``encoder=None`` raw maps must be supplied by the caller (file provider).
    """

    def __init__(self, head: ProjectionHead, matcher: MatcherParams, encoder: ToyEncoder | None = None):
        self.encoder = encoder
        self.head = head
        self.matcher = matcher

    @classmethod
    def create(cls, cfg: RunConfig, raw_channels: int | None = None) -> "StereoModel":
        rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
        encoder = None
        if cfg.encoder == "toy":
            encoder = ToyEncoder(rng)
            raw_channels = TOY_CHANNELS
        elif raw_channels is None:
            raise ConfigurationError("the file provider needs the raw channel count")
        head = ProjectionHead(raw_channels, cfg.dim, rng)
        matcher = MatcherParams(EpipolarTransformer(cfg.dim, rng), EpipolarTransformer(cfg.dim, rng),
                                ConvexUpsampler(cfg.dim, hidden=cfg.hidden, rng=rng), cfg.zeta, cfg.radius)
        return cls(head, matcher, encoder)

    @classmethod
    def oracle(cls, channels: int, zeta: float = 0.2, radius: int = 8, hidden: int = 64) -> "StereoModel":
        """A hand-set model for exactly corresponding input features.

        Identity projection, attention that only adds positional encoding, and
        convex weights saturated on the centre tap (nearest upsampling).
        """
        rng = np.random.default_rng(0)
        head = ProjectionHead.identity(channels)
        transformers = []
        for _ in range(2):
            tf = EpipolarTransformer(channels, rng)
            for block in ("self", "cross"):
                for name in ("v", "o"):
                    tf.params[f"{block}.{name}"].data[...] = 0.0
            transformers.append(tf)
        up = ConvexUpsampler(channels, hidden=hidden, rng=rng)
        s2 = up.factor ** 2
        up.params["w1"].data[...] = 0.0
        up.params["w2"].data[...] = 0.0
        up.params["b2"].data[4 * s2:5 * s2] = 30.0
        return cls(head, MatcherParams(transformers[0], transformers[1], up, zeta, radius), encoder=None)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.encoder is not None:
            out.update({f"encoder.{k}": v for k, v in self.encoder.params.items()})
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        out.update(self.matcher.parameters())
        return out

    def raw_features(self, left: np.ndarray, right: np.ndarray) -> tuple[RawFeatureMap, RawFeatureMap]:
        if self.encoder is None:
            raise ConfigurationError("model has no encoder; pass raw feature maps")
        return toy_encoder(left, self.encoder), toy_encoder(right, self.encoder)

    def __call__(self, raw_first: RawFeatureMap, raw_second: RawFeatureMap) -> Forward:
        if raw_first.channels != self.head.in_channels:
            raise DimensionError(f"raw maps have {raw_first.channels} channels, head expects {self.head.in_channels}")
        first = project(raw_first, self.head)
        second = project(raw_second, self.head)
        return Forward(match_stereo(first, second, self.matcher), first, second)

    def run(self, left: np.ndarray | None = None, right: np.ndarray | None = None,
            raw: tuple[RawFeatureMap, RawFeatureMap] | None = None) -> Forward:
        if raw is None:
            raw = self.raw_features(left, right)
        return self(*raw)


def provider_features(model: StereoModel, item, root: Path | None):
    """Raw maps for ``item`` from the model's encoder or from ``root/features``."""
    if model.encoder is not None:
        return model.raw_features(item.left, item.right)
    if root is None:
        raise ConfigurationError("the file provider needs a dataset root with a features/ directory")
    return load_provider_pair(Path(root), item.name, item.left.shape[:2])
