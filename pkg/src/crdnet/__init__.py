"""Cascaded residual density network for crowd counting, on a small numpy autodiff core."""

from .cnet import CascadeState, ResidualDensityModule, decompose, estimate_density, reconstruct, residual_step
from .data import (
    PointAnnotation,
    SynthConfig,
    build_target_pyramid,
    downsample_density,
    generate_density_map,
    generate_scene,
    load_annotation,
    read_density,
    target_residual,
    write_density,
)
from .losses import LossConfig, LossReport, euclidean_loss, local_count_loss, total_loss
from .model import CRDNet, DecoderConfig
from .pnet import BackboneConfig, StageSpec, build_backbone
from .tensor import Parameter, Tape, Tensor, backward
from .train import EvalResult, Sample, TrainConfig, count, evaluate, evaluate_counts, finetune, kfold_split, pretrain, pretrain_level

__version__ = "0.1.0"
