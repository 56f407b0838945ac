"""Cascaded residual density decoder.

Levels are walked coarsest to finest. With D(0) = 0, each level j computes

    R(j) = conv1x1(concat(up(D(j-1)), F))
    D(j) = up(D(j-1)) + R(j)

where F is the pyramid level matching up(D(j-1)) in resolution. The last
D is the full-resolution estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Parameter, Tensor, add, bilinear_upsample, concat_channels, conv2d, relu


class ResidualDensityModule:
    """1x1 conv from (density + feature channels) to a single residual channel.

    ``pre_widths`` optionally inserts 3x3 conv + ReLU layers before the 1x1.
    With no pre-stack, the weight on the density channel starts at
    ``density_gain`` so that up(D) + R initially carries the coarse count
    through a value-preserving upsample (gain 1/s**2 - 1).
    """

    def __init__(self, feature_channels: int, name: str, rng=None, pre_widths=(), dtype=np.float64, density_gain: float = 0.0):
        self.feature_channels = feature_channels
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.pre = []
        cin = feature_channels + 1
        for i, cout in enumerate(pre_widths):
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))
            self.pre.append(
                (
                    Parameter(w.astype(dtype), f"{name}.pre{i + 1}.weight"),
                    Parameter(np.zeros(cout, dtype=dtype), f"{name}.pre{i + 1}.bias"),
                )
            )
            cin = cout
        w = rng.normal(0.0, np.sqrt(1.0 / cin), (1, cin, 1, 1)) * 0.01
        if not self.pre:
            w[0, 0] = density_gain
        self.weight = Parameter(w.astype(dtype), f"{name}.weight")
        self.bias = Parameter(np.zeros(1, dtype=dtype), f"{name}.bias")

    @property
    def in_channels(self) -> int:
        return self.feature_channels + 1

    def parameters(self) -> list:
        return [p for pair in self.pre for p in pair] + [self.weight, self.bias]

    def __call__(self, density_up: Tensor, features: Tensor) -> Tensor:
        if features.shape[1] != self.feature_channels:
            raise ValueError(f"{self.name}: expected {self.feature_channels} feature channels, got {features.shape[1]}")
        x = concat_channels(density_up, features)
        for w, b in self.pre:
            x = relu(conv2d(x, w, b, padding=1))
        return conv2d(x, self.weight, self.bias)


@dataclass
class CascadeState:
    """Per-level maps, coarsest first.

    ``densities[0]`` is D(0); ``densities[j]`` and ``residuals[j-1]`` belong to
    internal level j. ``final`` is the full-resolution estimate.
    """

    densities: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    upsampled: list = field(default_factory=list)
    scale: int = 2

    @property
    def final(self) -> Tensor:
        return self.densities[-1]


def _upsample_prev(prev: Tensor, target_hw: tuple, s: int) -> Tensor:
    if prev.shape[2:] == target_hw and not np.any(prev.data):
        # zero D(0) stored at feature resolution when size(F_K) is not divisible by s
        return prev
    return bilinear_upsample(prev, s)


def residual_step(d_prev: Tensor, features: Tensor, module: ResidualDensityModule, s: int = 2):
    """One refinement level; returns (R, D, up(D_prev))."""
    up = _upsample_prev(d_prev, features.shape[2:], s)
    if up.shape[2:] != features.shape[2:]:
        raise ValueError(f"upsampled density {up.shape[2:]} does not match features {features.shape[2:]}")
    r = module(up, features)
    return r, add(up, r), up


def initial_density(coarsest: Tensor, s: int) -> Tensor:
    n, _, h, w = coarsest.shape
    if h % s == 0 and w % s == 0:
        h, w = h // s, w // s
    return Tensor(np.zeros((n, 1, h, w), dtype=coarsest.dtype))


def estimate_density(pyramid: list, modules: list, s: int = 2, start: Optional[Tensor] = None, levels: Optional[int] = None) -> CascadeState:
    """Run the cascade over ``pyramid`` (finest first) with ``modules[k]`` consuming ``pyramid[k]``.

    ``levels`` stops after that many coarse-to-fine steps (used for staged
    pretraining). ``start`` overrides D(0).
    """
    if len(pyramid) != len(modules):
        raise ValueError(f"{len(modules)} modules for {len(pyramid)} pyramid levels")
    d = start if start is not None else initial_density(pyramid[-1], s)
    state = CascadeState(densities=[d], scale=s)
    order = list(reversed(range(len(pyramid))))
    if levels is not None:
        order = order[:levels]
    for k in order:
        r, d, up = residual_step(d, pyramid[k], modules[k], s)
        state.residuals.append(r)
        state.upsampled.append(up)
        state.densities.append(d)
    return state


def upsample_through(x: np.ndarray, steps: int, s: int) -> np.ndarray:
    """Apply the fixed bilinear upsampling ``steps`` times to an NCHW array."""
    t = Tensor(x)
    for _ in range(steps):
        t = bilinear_upsample(t, s)
    return t.data


def decompose(state: CascadeState) -> list:
    """Residual arrays per level, coarsest first."""
    return [r.data for r in state.residuals]


def reconstruct(residuals: list, s: int = 2, d0: Optional[np.ndarray] = None) -> np.ndarray:
    """Telescoped sum: each residual upsampled through all finer levels."""
    n = len(residuals)
    total = np.zeros_like(residuals[-1])
    for j, r in enumerate(residuals):
        total = total + upsample_through(r, n - 1 - j, s)
    if d0 is not None and np.any(d0):
        total = total + upsample_through(d0, n, s)
    return total
