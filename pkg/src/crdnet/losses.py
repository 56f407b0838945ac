"""Euclidean loss, local count loss and their weighted sum.

All losses take NCHW estimates (a differentiable Tensor) and NCHW targets
(array or Tensor, treated as constants) with a single channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, record, scale


@dataclass
class LossConfig:
    lam: float = 1e-4
    patch_size: int = 32
    patch_stride: int = 16

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.patch_size < 1 or self.patch_stride < 1:
            raise ValueError("patch size and stride must be >= 1")


@dataclass
class LossReport:
    euclidean: float
    local_count: float
    total: float
    patch_count_errors: np.ndarray
    total_tensor: Tensor = None


def _targets(est: Tensor, targets) -> np.ndarray:
    q = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if est.data.ndim != 4:
        raise ValueError(f"estimates must be NCHW, got {est.shape}")
    if q.shape != est.shape:
        raise ValueError(f"estimate shape {est.shape} != target shape {q.shape}")
    if est.shape[0] < 1:
        raise ValueError("empty batch")
    return q


def euclidean_loss(est: Tensor, targets) -> Tensor:
    """(1/M) sum_j ||D_j - Q_j||^2."""
    q = _targets(est, targets)
    m = est.shape[0]
    diff = est.data - q
    out = Tensor(np.asarray((diff * diff).sum() / m))
    return record(out, (est,), lambda g: (g * (2.0 / m) * diff,))


def mse_loss(est: Tensor, targets) -> Tensor:
    """Mean over every element of the squared difference."""
    q = _targets(est, targets)
    diff = est.data - q
    n = diff.size
    out = Tensor(np.asarray((diff * diff).sum() / n))
    return record(out, (est,), lambda g: (g * (2.0 / n) * diff,))


def anchor_grid(size: int, h: int, t: int) -> int:
    """Number of stride-t anchors whose h-wide window fits in ``size``."""
    return (size - h) // t + 1


def patch_count_errors(diff: np.ndarray, h: int, t: int) -> np.ndarray:
    """c[n, a, b] = sum of diff over the h x h window anchored at (a*t, b*t).

    Accumulates the h*h window offsets in row-major order.
    """
    n, c, hh, ww = diff.shape
    if c != 1:
        raise ValueError(f"density maps must have one channel, got {c}")
    if h > min(hh, ww):
        raise ValueError(f"patch size {h} larger than map {hh}x{ww}")
    ay, ax = anchor_grid(hh, h, t), anchor_grid(ww, h, t)
    d = diff[:, 0]
    out = np.zeros((n, ay, ax), dtype=diff.dtype)
    for dy in range(h):
        for dx in range(h):
            out += d[:, dy : dy + t * (ay - 1) + 1 : t, dx : dx + t * (ax - 1) + 1 : t]
    return out


def _spread_patches(weights: np.ndarray, shape: tuple, h: int, t: int) -> np.ndarray:
    """Adjoint of patch_count_errors: add weights[n, a, b] to every pixel of its window."""
    n, hh, ww = shape
    _, ay, ax = weights.shape
    acc = np.zeros((n, hh + 1, ww + 1), dtype=weights.dtype)
    ys = np.arange(ay) * t
    xs = np.arange(ax) * t
    for y0, xs0 in ((ys, xs), (ys + h, xs + h)):
        np.add.at(acc, (slice(None), y0[:, None], xs0[None, :]), weights)
    np.add.at(acc, (slice(None), (ys + h)[:, None], xs[None, :]), -weights)
    np.add.at(acc, (slice(None), ys[:, None], (xs + h)[None, :]), -weights)
    return acc.cumsum(axis=1).cumsum(axis=2)[:, :hh, :ww]


def _local_count(est: Tensor, targets, h: int, t: int):
    q = _targets(est, targets)
    m = est.shape[0]
    diff = est.data - q
    c = patch_count_errors(diff, h, t)
    out = Tensor(np.asarray(np.abs(c).sum() / m))
    sign = np.sign(c)

    def _backward(g):
        spread = _spread_patches(sign, (m,) + est.shape[2:], h, t)
        return ((g / m) * spread[:, None],)

    return record(out, (est,), _backward), c


def local_count_loss(est: Tensor, targets, h: int, t: int) -> Tensor:
    """(1/M) sum_j sum_i |c_j(x_i)| over stride-t anchors of unpadded h x h patches."""
    return _local_count(est, targets, h, t)[0]


def total_loss(est: Tensor, targets, cfg: LossConfig) -> LossReport:
    le = euclidean_loss(est, targets)
    ly, c = _local_count(est, targets, cfg.patch_size, cfg.patch_stride)
    total = add(le, scale(ly, cfg.lam))
    return LossReport(
        euclidean=le.item(),
        local_count=ly.item(),
        total=total.item(),
        patch_count_errors=c,
        total_tensor=total,
    )
