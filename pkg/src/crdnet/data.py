"""Ground-truth density maps, target pyramids, synthetic scenes and file formats."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DENSITY_MAGIC = b"CRD1"
_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    """A density or annotation file could not be parsed."""


@dataclass
class PointAnnotation:
    width: int
    height: int
    points: list = field(default_factory=list)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        self.points = [(float(x), float(y)) for x, y in self.points]
        for x, y in self.points:
            if not (0.0 <= x < self.width and 0.0 <= y < self.height):
                raise ValueError(f"point ({x}, {y}) outside [0, {self.width}) x [0, {self.height})")

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class SynthConfig:
    """Procedural crowd scenes.

    Blob radius grows linearly from ``radius_top`` at row 0 to ``radius_bottom``
    at the last row, a crude stand-in for perspective.
    """

    image_size: int = 64
    count_min: int = 1
    count_max: int = 30
    radius_top: float = 1.5
    radius_bottom: float = 3.5
    intensity_min: float = 0.4
    intensity_max: float = 0.8
    background: float = 0.1
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.count_min < 0 or self.count_min > self.count_max:
            raise ValueError(f"bad count range ({self.count_min}, {self.count_max})")
        if self.radius_top <= 0 or self.radius_bottom <= 0:
            raise ValueError("blob radii must be positive")
        if self.image_size < 1:
            raise ValueError("image_size must be positive")


# ---------------------------------------------------------------------------
# density maps


def gaussian_kernel_1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-0.5 * (x / sigma) ** 2)


def generate_density_map(ann: PointAnnotation, sigma: float = 4.0, truncate: float = 4.0) -> np.ndarray:
    """Sum of one unit-mass Gaussian per head.

    Each kernel is centred on the pixel containing the point, cut to the
    image, then renormalized so it contributes exactly one person.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = ann.height, ann.width
    out = np.zeros((h, w), dtype=np.float64)
    g = gaussian_kernel_1d(sigma, truncate)
    r = len(g) // 2
    for x, y in ann.points:
        if not (0.0 <= x < w and 0.0 <= y < h):
            raise ValueError(f"point ({x}, {y}) outside {w}x{h} image")
        cx, cy = int(math.floor(x)), int(math.floor(y))
        r0, r1 = max(cy - r, 0), min(cy + r + 1, h)
        c0, c1 = max(cx - r, 0), min(cx + r + 1, w)
        gy = g[r0 - cy + r : r1 - cy + r]
        gx = g[c0 - cx + r : c1 - cx + r]
        k = np.outer(gy, gx)
        out[r0:r1, c0:c1] += k / k.sum()
    return out


def downsample_density(dmap: np.ndarray, factor: int) -> np.ndarray:
    """Block-sum downsampling; preserves the integral."""
    h, w = dmap.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"{h}x{w} map is not divisible by factor {factor}")
    if factor == 1:
        return dmap.copy()
    return dmap.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))


def build_target_pyramid(gt: np.ndarray, levels: int, scale: int = 2) -> list[np.ndarray]:
    """[H_1, ..., H_K], finest first; H_k is gt block-summed by scale**(k-1)."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    return [downsample_density(gt, scale ** k) for k in range(levels)]


def target_residual(target: np.ndarray, prev: np.ndarray, scale: int = 2) -> np.ndarray:
    """What a level must add to the upsampled coarser estimate to hit its target."""
    from .tensor import upsample_matrix

    uh = upsample_matrix(prev.shape[0], scale)
    uw = upsample_matrix(prev.shape[1], scale)
    up = uh @ prev @ uw.T
    if up.shape != target.shape:
        raise ValueError(f"upsampled previous map {up.shape} does not match target {target.shape}")
    return target - up


# ---------------------------------------------------------------------------
# synthetic scenes


def generate_scene(cfg: SynthConfig, seed: int) -> tuple[np.ndarray, PointAnnotation]:
    """Grayscale image of soft blobs plus the blob centres as head points.

    The image is clipped to [0, 1] so it survives an 8-bit PNG round trip
    up to quantization.
    """
    rng = np.random.default_rng([cfg.seed, seed])
    size = cfg.image_size
    n = int(rng.integers(cfg.count_min, cfg.count_max + 1))
    xs = rng.uniform(0.0, size, n)
    ys = rng.uniform(0.0, size, n)
    amps = rng.uniform(cfg.intensity_min, cfg.intensity_max, n)
    # uniform() can return the upper bound after rounding
    xs = np.minimum(xs, np.nextafter(size, 0))
    ys = np.minimum(ys, np.nextafter(size, 0))

    rows = np.arange(size, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(size, dtype=np.float64)[None, :] + 0.5
    image = np.full((size, size), cfg.background, dtype=np.float64)
    for x, y, a in zip(xs, ys, amps):
        rad = cfg.radius_top + (cfg.radius_bottom - cfg.radius_top) * y / size
        image += a * np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / (2.0 * rad**2))
    image += cfg.noise * rng.standard_normal((size, size))
    np.clip(image, 0.0, 1.0, out=image)
    ann = PointAnnotation(size, size, list(zip(xs.tolist(), ys.tolist())))
    return image, ann


# ---------------------------------------------------------------------------
# file formats


def write_density(path, dmap: np.ndarray) -> None:
    arr = np.asarray(dmap)
    if arr.ndim != 2:
        raise ValueError(f"density map must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(DENSITY_MAGIC, h, w))
        f.write(arr.astype("<f4").tobytes())


def read_density(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, h, w = _HEADER.unpack_from(raw)
    if magic != DENSITY_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {h}x{w}, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)


def annotation_to_dict(ann: PointAnnotation) -> dict:
    return {"width": ann.width, "height": ann.height, "points": [[x, y] for x, y in ann.points]}


def write_annotation(path, ann: PointAnnotation) -> None:
    Path(path).write_text(json.dumps(annotation_to_dict(ann)) + "\n", encoding="utf-8")


def load_annotation(path) -> PointAnnotation:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict) or not {"width", "height", "points"} <= doc.keys():
        raise FormatError(f"{path}: expected keys width, height, points")
    w, h, pts = doc["width"], doc["height"], doc["points"]
    if not isinstance(w, int) or not isinstance(h, int) or not isinstance(pts, list):
        raise FormatError(f"{path}: width/height must be integers and points a list")
    if any(not isinstance(p, (list, tuple)) or len(p) != 2 for p in pts):
        raise FormatError(f"{path}: every point must be an [x, y] pair")
    try:
        return PointAnnotation(w, h, [tuple(p) for p in pts])
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def write_image(path, image: np.ndarray) -> None:
    """Save a [0, 1] float image as 8-bit grayscale PNG (values are clipped)."""
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """Load a grayscale image as float64 in [0, 1]. ``.crd`` files are read raw."""
    path = Path(path)
    if path.suffix == ".crd":
        return read_density(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def export_png(path, dmap: np.ndarray) -> None:
    """Max-normalized grayscale view of a density map. For eyeballing only."""
    arr = np.asarray(dmap, dtype=np.float64)
    peak = arr.max() if arr.size else 0.0
    write_image(path, arr / peak if peak > 0 else np.zeros_like(arr))

