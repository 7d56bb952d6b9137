"""Desk-scale workloads: Gaussian blobs and a tiny image-grid format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Dataset", "make_blobs", "write_image_grid", "read_image_grid", "make_bars"]

_GRID_MAGIC = b"SBSG"


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1


def make_blobs(n_train: int = 512, n_test: int = 512, classes: int = 4, dim: int = 8,
               spread: float = 1.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters, rescaled per feature into ``[0, 1]``.

    Centers are drawn from ``N(0, 4 I)``; ``spread`` is the cluster std.
    The min-max scaling uses training statistics only.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 2.0, size=(classes, dim))
    n = n_train + n_test
    y = rng.integers(0, classes, size=n)
    x = centers[y] + rng.normal(0.0, spread, size=(n, dim))
    lo, hi = x[:n_train].min(axis=0), x[:n_train].max(axis=0)
    x = np.clip((x - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0, 1.0)
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def write_image_grid(path, images: np.ndarray, labels: np.ndarray, classes: int) -> None:
    """Header ``SBSG`` + little-endian uint32 ``n, h, w, classes``; then uint8 pixels and labels."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(_GRID_MAGIC + struct.pack("<4I", n, h, w, classes))
        f.write(images.tobytes(order="C"))
        f.write(labels.tobytes())


def read_image_grid(path, test_fraction: float = 0.5) -> Dataset:
    """Load an image-grid file; pixels scaled to ``[0, 1]`` and flattened."""
    raw = Path(path).read_bytes()
    if raw[:4] != _GRID_MAGIC:
        raise ValueError(f"{path}: not an image-grid file")
    n, h, w, _ = struct.unpack("<4I", raw[4:20])
    body = np.frombuffer(raw, dtype=np.uint8, offset=20)
    if body.size != n * h * w + n:
        raise ValueError(f"{path}: expected {n * h * w + n} payload bytes, found {body.size}")
    x = body[: n * h * w].reshape(n, h * w).astype(np.float64) / 255.0
    y = body[n * h * w:].astype(np.int64)
    cut = n - int(round(n * test_fraction))
    return Dataset(x[:cut], y[:cut], x[cut:], y[cut:])


def make_bars(n: int = 400, size: int = 6, seed: int = 0, noise: float = 0.15):
    """Four classes: horizontal bar, vertical bar, main diagonal, anti-diagonal."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=n)
    imgs = rng.uniform(0, noise, size=(n, size, size))
    pos = rng.integers(0, size, size=n)
    idx = np.arange(size)
    for i, (lab, p) in enumerate(zip(labels, pos)):
        if lab == 0:
            imgs[i, p, :] += 0.8
        elif lab == 1:
            imgs[i, :, p] += 0.8
        elif lab == 2:
            imgs[i, idx, idx] += 0.8
        else:
            imgs[i, idx, size - 1 - idx] += 0.8
    return (np.clip(imgs, 0, 1) * 255).round().astype(np.uint8), labels.astype(np.uint8)
