"""Small datasets for the experiments: IDX files, Gaussian blobs and a 1-d toy."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

__all__ = ["read_idx", "load_parity_idx", "synthetic_blobs", "interval_toy", "unit_rows"]


def read_idx(path) -> np.ndarray:
    """Read an IDX file (images ``0x00000803`` or labels ``0x00000801``).

    Gzipped files are detected by extension.
    """
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise ValueError(f"{path} is too short to be an IDX file")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == 0x00000801:
        (n,) = struct.unpack(">I", data[4:8])
        if len(data) < 8 + n:
            raise ValueError(f"{path} is truncated: header announces {n} labels")
        return np.frombuffer(data, dtype=np.uint8, count=n, offset=8).copy()
    if magic == 0x00000803:
        n, rows, cols = struct.unpack(">III", data[4:16])
        if len(data) < 16 + n * rows * cols:
            raise ValueError(f"{path} is truncated: header announces {n} images of {rows}x{cols}")
        return np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols).copy()
    raise ValueError(f"unknown IDX magic number {magic:#010x} in {path}")


def unit_rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize an all-zero row")
    return X / norms


def load_parity_idx(images, labels, n_points: int, offset: int = 0):
    """Flattened unit-norm images with odd/even labels (1 for odd)."""
    imgs = read_idx(images)
    labs = read_idx(labels)
    if imgs.ndim != 3 or labs.ndim != 1 or imgs.shape[0] != labs.shape[0]:
        raise ValueError("image and label files do not match")
    if offset + n_points > imgs.shape[0]:
        raise ValueError(f"requested {n_points} points from offset {offset}, file has {imgs.shape[0]}")
    sel = slice(offset, offset + n_points)
    X = imgs[sel].reshape(n_points, -1).astype(float)
    return unit_rows(X), (labs[sel] % 2).astype(int)


def synthetic_blobs(n_points: int, dim: int = 784, separation: float = 1.0, seed: int = 0):
    """Two Gaussian classes in ``dim`` dimensions, projected to unit norm.

    Class means are ``+-separation * u`` for a random unit vector ``u``; the
    noise has expected norm 1. Returns ``(X, labels)`` with labels
    alternating ``0, 1, 0, ...``.
    """
    rng = np.random.default_rng(seed)
    mean = rng.standard_normal(dim)
    mean *= separation / np.linalg.norm(mean)
    labels = np.arange(n_points) % 2
    X = rng.standard_normal((n_points, dim)) / np.sqrt(dim) + np.where(labels[:, None] == 1, mean, -mean)
    return unit_rows(X), labels


def interval_toy(n_points: int, n_classes: int = 3, low: float = -2.0, high: float = 2.0):
    """Equally spaced 1-d inputs labelled by which of ``n_classes`` equal intervals they fall in."""
    if n_points < 1:
        raise ValueError("n_points must be positive")
    x = np.linspace(low, high, n_points)
    edges = np.linspace(low, high, n_classes + 1)[1:-1]
    return x[:, None], np.digitize(x, edges)
