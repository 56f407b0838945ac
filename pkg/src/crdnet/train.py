"""Staged training, fine-tuning, checkpoints and count evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import build_target_pyramid
from .losses import LossConfig, mse_loss, total_loss
from .model import CRDNet
from .tensor import Tape, Tensor, backward, zero_grad

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    name: str = "adam"  # "sgd", "momentum" or "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    crop_size: int = 64
    patches_per_image: int = 4
    flip: bool = True
    batch_size: int = 8
    pretrain_lr: float = 1e-4
    finetune_lr: float = 1e-5
    pretrain_epochs: int = 2
    finetune_epochs: int = 2
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    gt_sigma: float = 4.0
    density_scale: float = 1.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if min(self.crop_size, self.patches_per_image, self.batch_size) < 1:
            raise ValueError("crop size, patches per image and batch size must be positive")
        if self.pretrain_lr < 0 or self.finetune_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.density_scale <= 0:
            raise ValueError("density_scale must be positive")


@dataclass
class Sample:
    """One training/evaluation image with its ground-truth density."""

    image: np.ndarray
    density: np.ndarray
    count: float
    name: str = ""


class TrainingDiverged(FloatingPointError):
    pass


class StageOrderError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    def __init__(self, params: Sequence, lr: float, cfg: OptimizerConfig):
        if cfg.name not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {cfg.name!r}")
        self.params = list(params)
        self.lr = lr
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        cfg = self.cfg
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if cfg.name == "sgd":
                p.data -= self.lr * g
            elif cfg.name == "momentum":
                m *= cfg.momentum
                m += g
                p.data -= self.lr * m
            else:
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1**self.t)
                vhat = v / (1 - cfg.beta2**self.t)
                p.data -= (self.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# data


def crop_patches(image: np.ndarray, gt: np.ndarray, cfg: TrainConfig, seed) -> list:
    """Aligned random crops of (image, density), optionally mirrored left-right."""
    size = cfg.crop_size
    h, w = image.shape
    if gt.shape != image.shape:
        raise ValueError(f"image {image.shape} and density {gt.shape} differ in size")
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(cfg.patches_per_image):
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        im = image[y : y + size, x : x + size]
        d = gt[y : y + size, x : x + size]
        if cfg.flip and rng.random() < 0.5:
            im, d = im[:, ::-1], d[:, ::-1]
        out.append((np.ascontiguousarray(im), np.ascontiguousarray(d)))
    return out


def _epoch_batches(samples: Sequence[Sample], cfg: TrainConfig, epoch_seed) -> list:
    rng = np.random.default_rng(epoch_seed)
    patches = []
    for i, s in enumerate(samples):
        patches.extend(crop_patches(s.image, s.density, cfg, [*np.atleast_1d(epoch_seed), i]))
    order = rng.permutation(len(patches))
    dtype = np.dtype(cfg.dtype)
    batches = []
    for b in range(0, len(order), cfg.batch_size):
        idx = order[b : b + cfg.batch_size]
        ims = np.stack([patches[i][0] for i in idx])[:, None].astype(dtype)
        dens = np.stack([patches[i][1] for i in idx])[:, None].astype(dtype) * dtype.type(cfg.density_scale)
        batches.append((ims, dens))
    return batches


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} during {where}")


# ---------------------------------------------------------------------------
# training stages


def pretrain_level(
    model: CRDNet,
    j: int,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    train_encoder: Optional[bool] = None,
    done: Optional[set] = None,
    on_step: Optional[Callable] = None,
) -> list:
    """Train the stage-j residual module (1 = coarsest) against its target residual.

    Coarser modules stay fixed. The encoder is trained only at stage 1 unless
    ``train_encoder`` says otherwise. Returns per-epoch mean losses.
    """
    k_levels, s = model.levels, model.scale
    if not 1 <= j <= k_levels:
        raise ValueError(f"stage {j} outside 1..{k_levels}")
    if done is not None and any(i not in done for i in range(1, j)):
        raise StageOrderError(f"stage {j} needs stages 1..{j - 1} trained first, have {sorted(done)}")
    if train_encoder is None:
        train_encoder = j == 1
    module = model.module_for_stage(j)
    params = list(module.parameters()) + (model.encoder.parameters() if train_encoder else [])
    opt = Optimizer(params, cfg.pretrain_lr, cfg.optimizer)
    level_index = k_levels - j  # finest-first pyramid index
    history = []
    for epoch in range(cfg.pretrain_epochs):
        losses = []
        for step, (ims, dens) in enumerate(_epoch_batches(samples, cfg, [cfg.seed, 100 + j, epoch])):
            targets = np.stack([build_target_pyramid(d[0], level_index + 1, s)[level_index] for d in dens])[:, None]
            if train_encoder:
                with Tape() as tape:
                    pyramid = model.encoder.extract_pyramid(Tensor(ims))
                    state = _cascade_to(model, pyramid, j)
                    resid = state.residuals[-1]
                    target = targets - state.upsampled[-1].data
                    loss = mse_loss(resid, target)
            else:
                pyramid = model.encoder.extract_pyramid(Tensor(ims))
                frozen = _cascade_to(model, pyramid, j - 1) if j > 1 else None
                d_prev = frozen.final if frozen is not None else None
                with Tape() as tape:
                    state = _cascade_step(model, pyramid, j, d_prev)
                    resid = state.residuals[-1]
                    target = targets - state.upsampled[-1].data
                    loss = mse_loss(resid, target)
            value = loss.item()
            _check_finite(value, f"pretraining stage {j}")
            opt.zero_grad()
            backward(tape, loss)
            opt.step()
            losses.append(value)
            if on_step is not None:
                on_step(j, epoch, step, value)
        history.append(float(np.mean(losses)))
        log.info("pretrain stage %d epoch %d loss %.6g", j, epoch, history[-1])
    if done is not None:
        done.add(j)
    return history


def _cascade_to(model: CRDNet, pyramid: list, stages: int):
    from .cnet import estimate_density

    return estimate_density(pyramid, model.modules, model.scale, levels=stages)


def _cascade_step(model: CRDNet, pyramid: list, j: int, d_prev):
    from .cnet import CascadeState, initial_density, residual_step

    k = model.levels - j
    if d_prev is None:
        d_prev = initial_density(pyramid[-1], model.scale)
    r, d, up = residual_step(Tensor(d_prev.data), pyramid[k], model.modules[k], model.scale)
    return CascadeState(densities=[d_prev, d], residuals=[r], upsampled=[up], scale=model.scale)


def pretrain(model: CRDNet, samples: Sequence[Sample], cfg: TrainConfig, on_step=None) -> dict:
    """All stages, coarsest first. Returns {stage: per-epoch losses}."""
    done: set = set()
    return {j: pretrain_level(model, j, samples, cfg, done=done, on_step=on_step) for j in range(1, model.levels + 1)}


def finetune(
    model: CRDNet,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    metrics_path=None,
    checkpoint_dir=None,
    on_epoch: Optional[Callable] = None,
) -> list:
    """End-to-end training of every parameter on the total loss of the final map.

    Returns per-step (step, L_E, L_Y, total) rows; writes them to
    ``metrics_path`` if given and a checkpoint per epoch to ``checkpoint_dir``.
    """
    opt = Optimizer(model.parameters(), cfg.finetune_lr, cfg.optimizer)
    rows = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "L_E", "L_Y", "total"])
    try:
        step = 0
        for epoch in range(cfg.finetune_epochs):
            for ims, dens in _epoch_batches(samples, cfg, [cfg.seed, 200, epoch]):
                with Tape() as tape:
                    state = model.forward(Tensor(ims))
                    report = total_loss(state.final, dens, cfg.loss)
                _check_finite(report.total, "fine-tuning")
                opt.zero_grad()
                backward(tape, report.total_tensor)
                opt.step()
                row = (step, report.euclidean, report.local_count, report.total)
                rows.append(row)
                if writer is not None:
                    writer.writerow([step, repr(row[1]), repr(row[2]), repr(row[3])])
                step += 1
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.ckpt", model)
            if on_epoch is not None:
                on_epoch(epoch, rows)
            log.info("finetune epoch %d last total %.6g", epoch, rows[-1][3] if rows else float("nan"))
    finally:
        if fh is not None:
            fh.close()
    return rows


# ---------------------------------------------------------------------------
# evaluation


def count(dmap) -> float:
    return float(np.sum(dmap.data if isinstance(dmap, Tensor) else dmap, dtype=np.float64))


@dataclass
class EvalResult:
    mae: float
    mse: float
    pairs: list

    def __post_init__(self):
        if self.mae < 0 or self.mse < 0:
            raise ValueError("metrics must be non-negative")


def evaluate_counts(gt_counts: Sequence[float], est_counts: Sequence[float]) -> EvalResult:
    """Mean absolute error and root mean squared error of per-image counts."""
    gt = np.asarray(gt_counts, dtype=np.float64)
    est = np.asarray(est_counts, dtype=np.float64)
    if gt.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if gt.shape != est.shape:
        raise ValueError("count lists differ in length")
    err = gt - est
    mae = float(np.mean(np.abs(err)))
    mse = float(np.sqrt(np.mean(err * err)))
    # Jensen; guard against last-ulp rounding
    mse = max(mse, mae) if np.isclose(mse, mae, rtol=1e-12, atol=0) else mse
    return EvalResult(mae, mse, list(zip(gt.tolist(), est.tolist())))


def evaluate(model: CRDNet, samples: Sequence[Sample], clamp: bool = False, density_scale: float = 1.0) -> EvalResult:
    """Whole-image inference; estimated count is the integral of the density."""
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    est = []
    for s in samples:
        d = model.predict(s.image)
        if clamp:
            d = np.maximum(d, 0.0)
        est.append(count(d) / density_scale)
    return evaluate_counts([s.count for s in samples], est)


def constant_predictor_mae(train: Sequence[Sample], test: Sequence[Sample]) -> float:
    mean = float(np.mean([s.count for s in train]))
    return evaluate_counts([s.count for s in test], [mean] * len(test)).mae


def kfold_split(n: int, k: int, seed: int = 0) -> list:
    """k (train_idx, test_idx) pairs; test folds partition range(n), sizes differ by <= 1."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train).tolist(), np.sort(test).tolist()))
    return out


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CRDC"
CKPT_VERSION = 1


def save_checkpoint(path, model: CRDNet, meta: Optional[dict] = None) -> None:
    """Binary container: magic, version, JSON metadata, then named float arrays."""
    from .config import backbone_to_dict

    meta = dict(meta or {})
    meta.setdefault("backbone", backbone_to_dict(model.backbone_cfg))
    meta.setdefault("decoder", asdict(model.decoder_cfg))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            arr = np.ascontiguousarray(p.data)
            code = {np.dtype("float32"): b"f", np.dtype("float64"): b"d"}[arr.dtype]
            f.write(struct.pack("<I", len(name)) + name + code + struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_checkpoint(path) -> tuple:
    """Return (metadata, {name: array}) from a checkpoint file."""
    from .data import FormatError

    raw = Path(path).read_bytes()
    try:
        magic, version, mlen = struct.unpack_from("<4sII", raw, 0)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(raw[off : off + mlen].decode("utf-8"))
        off += mlen
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + ln].decode("utf-8")
            off += ln
            code = raw[off : off + 1]
            off += 1
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dt = np.dtype("<f4" if code == b"f" else "<f8")
            size = int(np.prod(shape)) * dt.itemsize
            if off + size > len(raw):
                raise FormatError(f"{path}: truncated data for {name}")
            arrays[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
            off += size
    except struct.error as e:
        raise FormatError(f"{path}: truncated checkpoint ({e})") from None
    return meta, arrays


def load_checkpoint(path) -> tuple:
    """Rebuild the model stored at ``path``; returns (model, metadata)."""
    from .config import backbone_from_dict
    from .model import DecoderConfig

    meta, arrays = read_checkpoint(path)
    dtype = next(iter(arrays.values())).dtype if arrays else np.float64
    model = CRDNet(
        backbone_from_dict(meta["backbone"]),
        DecoderConfig(**meta.get("decoder", {})),
        dtype=dtype.newbyteorder("="),
    )
    model.load_state_dict(arrays)
    return model, meta
