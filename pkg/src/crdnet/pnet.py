"""Encoder producing a K-level feature pyramid from a single-channel image."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Parameter, Tensor, conv2d, maxpool2, relu


@dataclass
class StageSpec:
    widths: list = field(default_factory=lambda: [16, 16])
    kernel: int = 3
    dilation: int = 1


def _default_stages() -> list:
    return [
        StageSpec([16, 16]),
        StageSpec([32, 32]),
        StageSpec([64, 64]),
        StageSpec([64, 64], dilation=2),
    ]


@dataclass
class BackboneConfig:
    """Small VGG-style backbone.

    Stage ``i`` runs at resolution H / scale**i; consecutive stages are
    separated by log2(scale) 2x2 max pools. ``taps[k]`` is the index of the
    conv layer within stage ``k`` whose (post-ReLU) output becomes pyramid
    level k+1; ``None`` means the stage's last layer.
    """

    stages: list = field(default_factory=_default_stages)
    in_channels: int = 1
    levels: int = 4
    scale: int = 2
    taps: Optional[list] = None

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages]
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.scale < 2 or self.scale & (self.scale - 1):
            raise ValueError(f"scale must be a power of two >= 2, got {self.scale}")
        if len(self.stages) < self.levels:
            raise ValueError(f"{self.levels} levels need at least {self.levels} stages, got {len(self.stages)}")
        if self.taps is None:
            self.taps = [len(self.stages[k].widths) - 1 for k in range(self.levels)]
        if len(self.taps) != self.levels:
            raise ValueError(f"expected {self.levels} tap points, got {len(self.taps)}")
        for k, t in enumerate(self.taps):
            if not 0 <= t < len(self.stages[k].widths):
                raise ValueError(f"tap {t} out of range for stage {k}")
        for s in self.stages:
            if not s.widths or s.kernel % 2 == 0 or s.dilation < 1:
                raise ValueError(f"invalid stage {s}")

    @property
    def level_channels(self) -> list:
        return [self.stages[k].widths[t] for k, t in enumerate(self.taps)]

    @property
    def pools_per_stage(self) -> int:
        return int(self.scale).bit_length() - 1


class Backbone:
    """Convolution weights for every encoder layer, named ``pnet.s{i}.c{j}``."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.layers = []
        cin = cfg.in_channels
        for i, stage in enumerate(cfg.stages[: cfg.levels]):
            convs = []
            for j, cout in enumerate(stage.widths):
                fan_in = cin * stage.kernel**2
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, stage.kernel, stage.kernel))
                convs.append(
                    (
                        Parameter(w.astype(dtype), f"pnet.s{i + 1}.c{j + 1}.weight"),
                        Parameter(np.zeros(cout, dtype=dtype), f"pnet.s{i + 1}.c{j + 1}.bias"),
                    )
                )
                cin = cout
            self.layers.append(convs)

    def parameters(self) -> list:
        return [p for convs in self.layers for pair in convs for p in pair]

    def extract_pyramid(self, image: Tensor) -> list:
        """Return [F_1, ..., F_K], finest first."""
        cfg = self.cfg
        _, c, h, w = image.shape
        if c != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {c}")
        div = cfg.scale ** (cfg.levels - 1)
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} not divisible by {div}")
        x = image
        pyramid = []
        for i, convs in enumerate(self.layers):
            if i > 0:
                for _ in range(cfg.pools_per_stage):
                    x = maxpool2(x)
            stage = cfg.stages[i]
            pad = stage.dilation * (stage.kernel - 1) // 2
            for j, (wt, b) in enumerate(convs):
                x = relu(conv2d(x, wt, b, padding=pad, dilation=stage.dilation))
                if j == cfg.taps[i]:
                    pyramid.append(x)
        return pyramid


def build_backbone(cfg: BackboneConfig, seed: int = 0, dtype=np.float64) -> Backbone:
    return Backbone(cfg, seed, dtype)
