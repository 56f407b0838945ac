"""Experiment configuration and its JSON file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .model import DecoderConfig
from .pnet import BackboneConfig, StageSpec
from .train import TrainConfig


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = backbone_from_dict(self.backbone)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.synth, dict):
            self.synth = SynthConfig(**self.synth)
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")
        div = self.backbone.scale ** (self.backbone.levels - 1)
        if self.train.crop_size % div:
            raise ValueError(f"crop size {self.train.crop_size} not divisible by {div}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def backbone_to_dict(cfg: BackboneConfig) -> dict:
    return dataclasses.asdict(cfg)


def backbone_from_dict(doc: dict) -> BackboneConfig:
    doc = dict(doc)
    doc["stages"] = [StageSpec(**s) for s in doc.get("stages", [])] or BackboneConfig().stages
    return BackboneConfig(**doc)


def set_path(cfg: ExperimentConfig, dotted: str, value: str) -> None:
    """Override one field from a ``section.key=value`` string; value is parsed as JSON when possible."""
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    *parents, leaf = dotted.split(".")
    obj = cfg
    for p in parents:
        obj = getattr(obj, p)
    if not hasattr(obj, leaf):
        raise KeyError(f"no config field {dotted!r}")
    setattr(obj, leaf, parsed)
    obj.__post_init__()
