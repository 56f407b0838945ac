"""The full network: backbone pyramid plus one residual density module per level."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cnet import CascadeState, ResidualDensityModule, estimate_density
from .pnet import BackboneConfig, build_backbone
from .tensor import Tensor


@dataclass
class DecoderConfig:
    pre_widths: list = field(default_factory=list)
    # Targets are block sums, so a pixel at the finer level holds about 1/s^2 of
    # the coarser pixel it came from, while bilinear upsampling copies values.
    # With this flag the weight on the upsampled-density channel starts at
    # 1/s^2 - 1, so each level begins as a count-preserving upsample of the
    # coarser map instead of having to learn that scaling first.
    count_preserving_init: bool = True


class CRDNet:
    def __init__(self, backbone: BackboneConfig, decoder: DecoderConfig = None, seed: int = 0, dtype=np.float64):
        self.backbone_cfg = backbone
        self.decoder_cfg = decoder or DecoderConfig()
        self.dtype = np.dtype(dtype)
        self.encoder = build_backbone(backbone, seed, dtype)
        rng = np.random.default_rng([seed, 1])
        gain = 1.0 / backbone.scale**2 - 1.0 if self.decoder_cfg.count_preserving_init else 0.0
        # modules[k] consumes pyramid level k+1 (finest first)
        self.modules = [
            ResidualDensityModule(c, f"cnet.G{k + 1}", rng, self.decoder_cfg.pre_widths, dtype, gain)
            for k, c in enumerate(backbone.level_channels)
        ]

    @property
    def levels(self) -> int:
        return self.backbone_cfg.levels

    @property
    def scale(self) -> int:
        return self.backbone_cfg.scale

    def module_for_stage(self, j: int) -> ResidualDensityModule:
        """Module trained at pretraining stage j (1 = coarsest)."""
        return self.modules[self.levels - j]

    def parameters(self) -> list:
        return self.encoder.parameters() + [p for m in self.modules for p in m.parameters()]

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def forward(self, image, levels: int = None) -> CascadeState:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        if x.data.ndim == 2:
            x = Tensor(x.data[None, None])
        pyramid = self.encoder.extract_pyramid(x)
        return estimate_density(pyramid, self.modules, self.scale, levels=levels)

    __call__ = forward

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Full-resolution density for a single HxW image, no tape."""
        state = self.forward(np.asarray(image, dtype=self.dtype)[None, None])
        return state.final.data[0, 0]

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = params.keys() - state.keys()
        extra = state.keys() - params.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            v = np.asarray(state[name])
            if v.shape != p.shape:
                raise ValueError(f"{name}: shape {v.shape} != {p.shape}")
            p.data[...] = v
