"""Datasets (CIFAR-10 binary, deterministic synthetic shapes) and augmentation primitives.

Images live in memory as uint8 (N, 3, H, W); ``to_model_space`` maps them to
float [-1, 1] right before they enter a model.
"""

from __future__ import annotations

import colorsys
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .rng import Stream

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8 (N, 3, H, W)
    labels: np.ndarray  # int64 (N,)
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.name)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

def parse_cifar_bytes(blob: bytes) -> Dataset:
    if len(blob) % RECORD_BYTES:
        raise DataError(f"{len(blob)} bytes is not a multiple of the {RECORD_BYTES}-byte "
                        "record size (truncated file?)")
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise DataError(f"record {bad[0]} has label {labels[bad[0]]} >= {NUM_CLASSES}")
    images = rec[:, 1:].reshape(-1, *IMAGE_SHAPE).copy()
    return Dataset(images, labels, "cifar10")


def load_cifar_binary(path: str | os.PathLike) -> Dataset:
    """Read one CIFAR-10 ``.bin`` file: label byte then 3x1024 planar RGB bytes."""
    return parse_cifar_bytes(Path(path).read_bytes())


def load_cifar_split(root: str | os.PathLike, split: str = "train") -> Dataset:
    root = Path(root)
    sub = root / "cifar-10-batches-bin"
    if sub.is_dir():
        root = sub
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" \
        else ["test_batch.bin"]
    parts = [load_cifar_binary(root / n) for n in names]
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), "cifar10")


def data_dir() -> Path | None:
    d = os.environ.get("TCAE_DATA_DIR")
    return Path(d) if d else None


# ---------------------------------------------------------------------------
# value mapping
# ---------------------------------------------------------------------------

def to_model_space(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (np.asarray(pixels, dtype=dtype) / 127.5 - 1.0).astype(dtype)


def from_model_space(x: np.ndarray) -> np.ndarray:
    """Inverse of ``to_model_space``, rounded and clamped to uint8."""
    return np.clip(np.rint((np.asarray(x, np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def to_unit(x: np.ndarray) -> np.ndarray:
    """[-1, 1] model space -> [0, 1] metric space, clamped."""
    return np.clip((np.asarray(x) + 1.0) * 0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# augmentation primitives
# ---------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    return _kernels.bilinear_sample(img, 0.0, 0.0, h, w, out_h, out_w)


def sample_crop_box(h: int, w: int, scale: tuple[float, float], rng: Stream,
                    ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> tuple[float, float, float, float]:
    """(top, left, crop_h, crop_w) with area uniform in ``scale`` and log-uniform aspect."""
    lo, hi = scale
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"scale range {scale} must lie in (0, 1]")
    area = h * w
    lr = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        a = area * rng.uniform(lo, hi)
        ar = math.exp(rng.uniform(*lr))
        cw = math.sqrt(a * ar)
        ch = math.sqrt(a / ar)
        if cw <= w and ch <= h:
            top = rng.uniform(0, h - ch)
            left = rng.uniform(0, w - cw)
            return top, left, ch, cw
    # fallback: centred crop of the requested area with aspect clamped to fit
    a = area * hi
    side = min(math.sqrt(a), h, w)
    return (h - side) / 2, (w - side) / 2, side, side


def random_resized_crop(img: np.ndarray, scale: tuple[float, float], out_size: int,
                        rng: Stream, ratio: tuple[float, float] = (3 / 4, 4 / 3)
                        ) -> tuple[np.ndarray, tuple]:
    """Crop a float (C, H, W) image and resize it bilinearly. Returns (crop, box)."""
    _, h, w = img.shape
    box = sample_crop_box(h, w, scale, rng, ratio)
    top, left, ch, cw = box
    return _kernels.bilinear_sample(img, top, left, ch, cw, out_size, out_size), box


def color_jitter(img: np.ndarray, strength: float, rng: Stream) -> np.ndarray:
    """Per-channel brightness and contrast jitter in [-1, 1] space."""
    if strength <= 0:
        return img
    c = img.shape[0]
    bright = rng.uniform(-strength, strength, size=(c, 1, 1))
    contrast = 1.0 + rng.uniform(-strength, strength, size=(c, 1, 1))
    mean = img.mean(axis=(1, 2), keepdims=True)
    out = (img - mean) * contrast + mean + bright
    return np.clip(out, -1.0, 1.0).astype(img.dtype)


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

SHAPES = ("disk", "square", "ring", "cross", "hbar", "vbar", "diamond", "triangle",
          "frame", "dots")


@dataclass(frozen=True)
class SyntheticSpec:
    """Ten classes, each a (shape, hue) pair drawn over a smooth low-saturation background."""

    size: int = 32
    hue_jitter: float = 0.02
    noise: float = 2.0  # pixel noise std in byte units
    seed: int = 0

    def class_hue(self, k: int) -> float:
        return k / NUM_CLASSES


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, r: float) -> np.ndarray:
    ay, ax = np.abs(yy), np.abs(xx)
    if kind == "disk":
        return yy ** 2 + xx ** 2 <= r ** 2
    if kind == "square":
        return (ay <= 0.8 * r) & (ax <= 0.8 * r)
    if kind == "ring":
        d = np.sqrt(yy ** 2 + xx ** 2)
        return (d <= r) & (d >= 0.55 * r)
    if kind == "cross":
        return ((ay <= 0.3 * r) & (ax <= r)) | ((ax <= 0.3 * r) & (ay <= r))
    if kind == "hbar":
        return (ay <= 0.35 * r) & (ax <= 1.1 * r)
    if kind == "vbar":
        return (ax <= 0.35 * r) & (ay <= 1.1 * r)
    if kind == "diamond":
        return ay + ax <= r
    if kind == "triangle":
        return (yy <= 0.7 * r) & (yy >= -r) & (ax <= 0.5 * (yy + r))
    if kind == "frame":
        return (np.maximum(ay, ax) <= r) & (np.maximum(ay, ax) >= 0.65 * r)
    if kind == "dots":
        s = 0.55 * r
        return ((yy - s) ** 2 + (xx - s) ** 2 <= (0.4 * r) ** 2) | \
            ((yy + s) ** 2 + (xx + s) ** 2 <= (0.4 * r) ** 2)
    raise ValueError(kind)


def synth_image(label: int, spec: SyntheticSpec, rng: Stream) -> np.ndarray:
    s = spec.size
    grid = np.arange(s) + 0.5
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    # background: random gray level plus a gentle gradient
    base = rng.uniform(60, 190)
    gy, gx = rng.uniform(-1.5, 1.5, size=2)
    tint = rng.uniform(-12, 12, size=3)
    bg = base + gy * (yy - s / 2) + gx * (xx - s / 2)
    img = np.stack([bg + t for t in tint])
    # foreground shape
    hue = (spec.class_hue(label) + rng.uniform(-spec.hue_jitter, spec.hue_jitter)) % 1.0
    sat = rng.uniform(0.65, 1.0)
    val = rng.uniform(0.7, 1.0)
    rgb = np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 255.0
    cy, cx = s / 2 + rng.uniform(-4, 4, size=2)
    r = s * rng.uniform(0.25, 0.36)
    # fractional coverage from 4x4 supersampling gives anti-aliased edges
    offs = (np.arange(4) + 0.5) / 4 - 0.5
    cov = np.mean([_shape_mask(SHAPES[label], yy + dy - cy, xx + dx - cx, r)
                   for dy in offs for dx in offs], axis=0)
    shade = 1.0 + 0.15 * ((yy - cy) / r)  # vertical shading inside the object
    for ch in range(3):
        img[ch] = (1.0 - cov) * img[ch] + cov * rgb[ch] * shade
    img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_synthetic(n: int, spec: SyntheticSpec = SyntheticSpec(), split: str = "train"
                   ) -> Dataset:
    """Deterministic balanced synthetic dataset; image i depends only on (seed, split, i)."""
    root = Stream(spec.seed, ("synthetic", split))
    labels = np.arange(n, dtype=np.int64) % NUM_CLASSES
    labels = labels[root.split("order").permutation(n)]
    images = np.empty((n, 3, spec.size, spec.size), np.uint8)
    for i in range(n):
        images[i] = synth_image(int(labels[i]), spec, root.split(i))
    return Dataset(images, labels, f"synthetic-{split}")


def load_dataset(name: str, split: str, n: int | None = None, seed: int = 0) -> Dataset:
    """``name`` is "synthetic" or "cifar10" (read from ``TCAE_DATA_DIR``)."""
    if name == "synthetic":
        default = 10_000 if split == "train" else 2_000
        return make_synthetic(n or default, SyntheticSpec(seed=seed), split)
    if name == "cifar10":
        root = data_dir()
        if root is None:
            raise DataError("TCAE_DATA_DIR is not set; cannot locate CIFAR-10 files")
        ds = load_cifar_split(root, split)
        return ds.head(n) if n else ds
    raise DataError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return Stream(seed, ("shuffle", str(epoch))).permutation(n)


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int, drop_last: bool = True):
    """Yield (float images in [-1, 1], labels) in a seeded per-epoch order."""
    order = epoch_order(len(ds), seed, epoch)
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for i in range(0, stop, batch_size):
        idx = order[i:i + batch_size]
        if len(idx) == 0:
            break
        yield to_model_space(ds.images[idx]), ds.labels[idx]


def pooled_pixels(images: np.ndarray, pool: int = 8) -> np.ndarray:
    """Average-pool uint8 or float images to (N, C*(H/pool)*(W/pool)) float64 features."""
    x = np.asarray(images, np.float64)
    n, c, h, w = x.shape
    x = x.reshape(n, c, h // pool, pool, w // pool, pool).mean(axis=(3, 5))
    return x.reshape(n, -1)
