"""Dataset ingestion: CIFAR-10 binary batches, synthetic generators, binary caches.

The CIFAR-10 batch format is 3073-byte records: one label byte followed by
3072 pixel bytes in channel-planar order (pixel (c, y, x) at offset
1 + 1024 c + 32 y + x).  Loading is position-exact and deterministic given a
seed; pixels are scaled to [0, 1] then standardized per channel over the
loaded subset.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .params import RngState

RECORD_BYTES = 3073
N_CLASSES = 10


class FormatError(ValueError):
    """Raised on malformed binary inputs (bad sizes, corrupt labels)."""


@dataclass
class Dataset:
    X: np.ndarray           # (n, p) float64 inputs
    Y: np.ndarray           # (n, q) float64 targets
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise FormatError("X and Y must be 2-D with matching row counts")
        if self.X.shape[0] < 1:
            raise FormatError("dataset needs at least one example")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise FormatError("dataset contains non-finite values")

    @property
    def n(self):
        return self.X.shape[0]


def _batch_files(path: str) -> list[str]:
    if os.path.isfile(path):
        return [path]
    files = sorted(f for f in os.listdir(path) if f.endswith(".bin"))
    if not files:
        raise FormatError(f"no .bin batch files under {path!r}")
    return [os.path.join(path, f) for f in files]


def load_cifar10_subset(path, n_per_class: int, seed: int) -> Dataset:
    """Class-balanced subset: first n_per_class hits per class after a seeded shuffle."""
    labels, pixels = [], []
    files = _batch_files(str(path))
    for fname in files:
        raw = np.fromfile(fname, dtype=np.uint8)
        if raw.size % RECORD_BYTES != 0:
            raise FormatError(
                f"{fname}: size {raw.size} is not a multiple of {RECORD_BYTES}")
        rec = raw.reshape(-1, RECORD_BYTES)
        if rec[:, 0].max(initial=0) > N_CLASSES - 1:
            raise FormatError(f"{fname}: corrupt label byte > {N_CLASSES - 1}")
        labels.append(rec[:, 0])
        pixels.append(rec[:, 1:])
    labels = np.concatenate(labels)
    pixels = np.concatenate(pixels)

    order = RngState(seed).permutation(labels.size)
    counts = np.zeros(N_CLASSES, dtype=int)
    chosen = []
    for idx in order:
        c = labels[idx]
        if counts[c] < n_per_class:
            counts[c] += 1
            chosen.append(idx)
            if counts.sum() == n_per_class * N_CLASSES:
                break
    if counts.min() < n_per_class:
        raise FormatError(
            f"not enough examples per class: wanted {n_per_class}, got {counts.tolist()}")
    chosen = np.array(chosen)

    X = pixels[chosen].astype(np.float64) / 255.0
    for c in range(3):  # channel-planar columns
        sl = slice(1024 * c, 1024 * (c + 1))
        m, s = X[:, sl].mean(), X[:, sl].std()
        X[:, sl] = (X[:, sl] - m) / s
    Y = np.zeros((len(chosen), N_CLASSES))
    Y[np.arange(len(chosen)), labels[chosen]] = 1.0
    return Dataset(X, Y, {
        "source": "cifar10",
        "files": [os.path.basename(f) for f in files],
        "n_per_class": int(n_per_class),
        "subset_seed": int(seed),
        "normalization": "per_channel_standardized",
    })


def gen_synthetic(kind: str, n: int, p: int, q: int, seed: int,
                  noise: float = 0.0, separation: float = 4.0) -> Dataset:
    """Seeded synthetic datasets: teacher_mlp | random_regression | two_gaussians."""
    if n < 1 or p < 1 or q < 1:
        raise ValueError("n, p, q must be >= 1")
    rng = RngState(seed)
    meta = {"source": kind, "n": n, "p": p, "q": q, "seed": int(seed), "noise": noise}

    if kind == "random_regression":
        X = rng.normal(n * p).reshape(n, p)
        A = rng.normal(p * q).reshape(p, q) / np.sqrt(p)
        Y = X @ A
        if noise > 0:
            Y = Y + noise * rng.normal(n * q).reshape(n, q)
        return Dataset(X, Y, meta)

    if kind == "teacher_mlp":
        h = max(2 * p, 8)
        X = rng.normal(n * p).reshape(n, p)
        W1 = rng.normal(p * h).reshape(p, h) / np.sqrt(p)
        W2 = rng.normal(h * q).reshape(h, q) / np.sqrt(h)
        Y = np.tanh(X @ W1) @ W2
        if noise > 0:
            Y = Y + noise * rng.normal(n * q).reshape(n, q)
        return Dataset(X, Y, meta)

    if kind == "two_gaussians":
        if q != 2:
            raise ValueError("two_gaussians is a binary task; q must be 2")
        mean = rng.normal(p)
        mean *= 0.5 * separation / np.linalg.norm(mean)
        labels = (rng.uniform(n) < 0.5).astype(int)
        X = rng.normal(n * p).reshape(n, p) + np.where(labels[:, None] == 1, mean, -mean)
        Y = np.zeros((n, 2))
        Y[np.arange(n), labels] = 1.0
        meta["separation"] = separation
        return Dataset(X, Y, meta)

    raise ValueError(f"unknown synthetic kind {kind!r}")


# -- binary caches ----------------------------------------------------------

_MATRIX_MAGIC = None  # plain 2-integer header per the interface contract


def save_matrix_bin(path, M: np.ndarray) -> None:
    """Row-major float64 payload with a 2 x int64 (rows, cols) header."""
    M = np.ascontiguousarray(np.asarray(M, dtype=np.float64))
    if M.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    with open(str(path), "wb") as fh:
        np.array(M.shape, dtype="<i8").tofile(fh)
        M.astype("<f8").tofile(fh)


def load_matrix_bin(path) -> np.ndarray:
    with open(str(path), "rb") as fh:
        header = np.fromfile(fh, dtype="<i8", count=2)
        if header.size != 2 or (header <= 0).any():
            raise FormatError(f"{path}: bad matrix header")
        rows, cols = int(header[0]), int(header[1])
        data = np.fromfile(fh, dtype="<f8")
    if data.size != rows * cols:
        raise FormatError(f"{path}: payload size {data.size} != {rows}x{cols}")
    return data.reshape(rows, cols)


def save_dataset(path, ds: Dataset) -> None:
    """Header (n, p, q as int64) + X + Y row-major float64; metadata sidecar."""
    with open(str(path), "wb") as fh:
        np.array([ds.n, ds.X.shape[1], ds.Y.shape[1]], dtype="<i8").tofile(fh)
        np.ascontiguousarray(ds.X).astype("<f8").tofile(fh)
        np.ascontiguousarray(ds.Y).astype("<f8").tofile(fh)
    with open(str(path) + ".meta", "w") as fh:
        for k in sorted(ds.metadata):
            fh.write(f"{k} = {ds.metadata[k]}\n")


def load_dataset(path) -> Dataset:
    with open(str(path), "rb") as fh:
        header = np.fromfile(fh, dtype="<i8", count=3)
        if header.size != 3 or (header <= 0).any():
            raise FormatError(f"{path}: bad dataset header")
        n, p, q = (int(v) for v in header)
        X = np.fromfile(fh, dtype="<f8", count=n * p).reshape(n, p)
        Y = np.fromfile(fh, dtype="<f8", count=n * q)
    if Y.size != n * q:
        raise FormatError(f"{path}: truncated dataset payload")
    meta = {"source": "cache", "path": str(path)}
    return Dataset(X, Y.reshape(n, q), meta)
