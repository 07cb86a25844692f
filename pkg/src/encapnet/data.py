"""Dataset IO: IDX files, a synthetic oriented-bar set, and batching.

IDX layout (big-endian throughout): u32 magic, then u32 dims, then raw
bytes. Magic 2051 (0x803) is an image tensor (N, H, W) of unsigned bytes,
scaled to [0, 1] floats on load; magic 2049 (0x801) is a label vector.
Saving a loaded array reproduces the original file byte for byte.

The synthetic set is one bright bar per image whose orientation encodes the
class: class k out of K uses angle pi*k/K. The first K samples carry the
canonical pose (centered, no jitter, no noise) so tests can pin exact
pixels; the rest get small rotation/position jitter and additive noise,
keeping classes separated because the jitter stays below half the angular
spacing.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .tensor import seeded_rng

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


def load_idx(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IMAGES_MAGIC:
        if len(raw) < 16:
            raise DataFormatError(f"{path}: truncated IDX image header")
        n, h, w = struct.unpack(">III", raw[4:16])
        body = raw[16:]
        if len(body) != n * h * w:
            raise DataFormatError(
                f"{path}: expected {n * h * w} image bytes, found {len(body)}")
        pixels = np.frombuffer(body, dtype=np.uint8).reshape(n, h, w)
        return pixels.astype(np.float64) / 255.0
    if magic == LABELS_MAGIC:
        if len(raw) < 8:
            raise DataFormatError(f"{path}: truncated IDX label header")
        n = struct.unpack(">I", raw[4:8])[0]
        body = raw[8:]
        if len(body) != n:
            raise DataFormatError(f"{path}: expected {n} label bytes, found {len(body)}")
        return np.frombuffer(body, dtype=np.uint8).astype(np.int64)
    raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")


def save_idx(path: str, arr: np.ndarray) -> None:
    if arr.ndim == 3:
        if arr.dtype == np.uint8:
            body = arr
        else:
            if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
                raise DataFormatError("image values must lie in [0, 1] to serialize")
            body = np.rint(np.asarray(arr, dtype=np.float64) * 255.0).astype(np.uint8)
        header = struct.pack(">IIII", IMAGES_MAGIC, *arr.shape)
    elif arr.ndim == 1:
        if arr.min() < 0 or arr.max() > 255:
            raise DataFormatError("labels must fit in a byte")
        body = arr.astype(np.uint8)
        header = struct.pack(">II", LABELS_MAGIC, arr.shape[0])
    else:
        raise DataFormatError(f"cannot serialize array of ndim {arr.ndim} as IDX")
    with open(path, "wb") as f:
        f.write(header)
        f.write(body.tobytes())


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    dir: str = "data"
    train_images: str = "train-images-idx3-ubyte"
    train_labels: str = "train-labels-idx1-ubyte"
    test_images: str = "t10k-images-idx3-ubyte"
    test_labels: str = "t10k-labels-idx1-ubyte"
    n_train: int = 2000
    n_test: int = 400
    n_classes: int = 10
    image_size: int = 28
    noise: float = 0.05
    seed: int = 0
    limit_train: int = 0
    limit_test: int = 0

    def __post_init__(self):
        if self.source not in ("idx", "synthetic"):
            raise ConfigError(f"unknown data source {self.source!r}")


def bar_image(size: int, angle: float, center, half_len: float,
              half_width: float = 1.5) -> np.ndarray:
    """Analytic anti-aliased bar: intensity falls off linearly across and along."""
    cy, cx = center
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    along = dx * np.cos(angle) + dy * np.sin(angle)
    across = -dx * np.sin(angle) + dy * np.cos(angle)
    img = np.clip(1.0 - np.abs(across) / half_width, 0.0, 1.0)
    img *= np.clip(half_len + 1.0 - np.abs(along), 0.0, 1.0)
    return img


def synth_generate(n: int, n_classes: int = 10, image_size: int = 28,
                   noise: float = 0.05, seed: int = 0):
    """n bar images with orientation classes; first n_classes are canonical."""
    if n_classes < 2 or n < n_classes:
        raise ConfigError("need n >= n_classes >= 2")
    rng = seeded_rng(seed, "synth")
    labels = np.arange(n, dtype=np.int64) % n_classes
    images = np.empty((n, image_size, image_size), dtype=np.float64)
    c0 = (image_size - 1) / 2.0
    half_len = 0.35 * image_size
    max_rot = 0.5 * np.pi / n_classes * 0.8
    for i in range(n):
        angle = np.pi * labels[i] / n_classes
        if i < n_classes:
            img = bar_image(image_size, angle, (c0, c0), half_len)
        else:
            angle = angle + rng.uniform(-max_rot, max_rot)
            cy = c0 + rng.uniform(-2.0, 2.0)
            cx = c0 + rng.uniform(-2.0, 2.0)
            img = bar_image(image_size, angle, (cy, cx), half_len)
            img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels


def load_dataset(dc: DataConfig):
    """(train_x, train_y, test_x, test_y); images are (N, H, W) in [0, 1]."""
    if dc.source == "idx":
        tx = load_idx(os.path.join(dc.dir, dc.train_images))
        ty = load_idx(os.path.join(dc.dir, dc.train_labels))
        ex = load_idx(os.path.join(dc.dir, dc.test_images))
        ey = load_idx(os.path.join(dc.dir, dc.test_labels))
    else:
        tx, ty = synth_generate(dc.n_train, dc.n_classes, dc.image_size,
                                dc.noise, dc.seed)
        ex, ey = synth_generate(dc.n_test, dc.n_classes, dc.image_size,
                                dc.noise, dc.seed + 1)
    if tx.shape[0] != ty.shape[0] or ex.shape[0] != ey.shape[0]:
        raise DataFormatError("image/label counts disagree")
    if dc.limit_train:
        tx, ty = tx[:dc.limit_train], ty[:dc.limit_train]
    if dc.limit_test:
        ex, ey = ex[:dc.limit_test], ey[:dc.limit_test]
    return tx, ty, ex, ey


def augment_crop(x: np.ndarray, rng: np.random.Generator, pad: int = 1) -> np.ndarray:
    """Zero-pad each side by `pad` then crop back at a random offset per image."""
    n, h, w = x.shape
    padded = np.zeros((n, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    padded[:, pad:pad + h, pad:pad + w] = x
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    out = np.empty_like(x)
    for i in range(n):
        out[i] = padded[i, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    return out


def batches(images: np.ndarray, labels: np.ndarray, batch_size: int,
            seed: int = 0, epoch: int = 0, shuffle: bool = True,
            augment: bool = False):
    """Deterministic minibatch stream for one epoch.

    The order is a pure function of (seed, epoch); the final short batch is
    kept. Yields (x (B,1,H,W) float, y (B,) int) pairs.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    n = images.shape[0]
    if shuffle:
        order = seeded_rng(seed, "batches", epoch).permutation(n)
    else:
        order = np.arange(n)
    crop_rng = seeded_rng(seed, "augment", epoch) if augment else None
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = images[idx]
        if augment:
            x = augment_crop(x, crop_rng)
        yield x[:, None, :, :], labels[idx]
