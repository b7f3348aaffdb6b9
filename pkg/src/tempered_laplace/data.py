"""Desk-scale datasets: Gaussian blobs, two spirals, and IDX image files."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .nn import Dataset, softmax

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BlobsConditional:
    """Exact ``p(y|x)`` for equal-weight isotropic Gaussian classes."""

    def __init__(self, means: np.ndarray, std: float):
        self.means = np.asarray(means, dtype=np.float64)
        self.std = float(std)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        sq = ((X[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        return softmax(-sq / (2 * self.std**2))


def blob_means(num_classes: int, dim: int, radius: float) -> np.ndarray:
    """Class means evenly spaced on a circle in the first two coordinates."""
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    if dim > 1:
        means[:, 1] = radius * np.sin(angles)
    return means


def make_blobs(n: int, seed: int = 0, num_classes: int = 2, dim: int = 2, radius: float = 2.0,
               std: float = 1.0, name: str = "blobs") -> Dataset:
    rng = np.random.default_rng(seed)
    means = blob_means(num_classes, dim, radius)
    y = rng.integers(0, num_classes, size=n)
    X = means[y] + std * rng.standard_normal((n, dim))
    cond = BlobsConditional(means, std)
    return Dataset(X, y.astype(np.int64), cond(X), name, num_classes)


def make_spirals(n: int, seed: int = 0, noise: float = 0.2, turns: float = 1.5,
                 name: str = "spirals") -> Dataset:
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    t = np.sqrt(rng.uniform(0, 1, size=n)) * turns * 2 * np.pi
    r = t / (turns * 2 * np.pi) * 3.0
    sign = np.where(y == 0, 1.0, -1.0)
    X = np.stack([sign * r * np.cos(t), sign * r * np.sin(t)], axis=1)
    X += noise * rng.standard_normal(X.shape)
    return Dataset(X, y.astype(np.int64), None, name, 2)


# -- IDX ------------------------------------------------------------------------------


def _open(path: Path, mode: str = "rb"):
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise IdxFormatError(f"{path}: expected {int(np.prod(dims))} data bytes, found {body.size}")
    return body.reshape(dims)


def write_idx_images(path, images: np.ndarray):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with _open(Path(path), "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with _open(Path(path), "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


def load_idx_dataset(images_path, labels_path, subset=None, normalization: str = "unit",
                     num_classes: int = 10, name: str = "idx") -> Dataset:
    """Read an IDX image/label pair into an ``n x (rows*cols)`` dataset.

    Pixels are scaled to ``[0, 1]``; ``normalization="standardize"`` further
    centres and scales every feature (constant features are left centred).
    """
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        raise IdxFormatError(f"{labels_path}: label {int(labels.max())} outside [0, {num_classes})")
    if subset is not None:
        images, labels = images[:subset], labels[:subset]
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if normalization == "standardize":
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        X = (X - mu) / np.where(sd > 0, sd, 1.0)
    elif normalization != "unit":
        raise ValueError(f"unknown normalization {normalization!r}")
    return Dataset(X, labels.astype(np.int64), None, name, num_classes)


# -- splits ---------------------------------------------------------------------------


def split_indices(n: int, fractions, seed: int = 0) -> tuple:
    """Disjoint train/validation/test index arrays covering ``range(n)``."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("split fractions must be three positive numbers summing to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split_dataset(data: Dataset, fractions, seed: int = 0) -> tuple:
    idx = split_indices(data.n, fractions, seed)
    names = ("train", "validation", "test")
    return tuple(data.subset(i, f"{data.name}-{s}") for i, s in zip(idx, names))
