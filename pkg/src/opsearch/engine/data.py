"""Datasets, the GOSD binary container and the synthetic pattern generator."""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from ..errors import ParseError

MAGIC = b"GOSD"
VERSION = 1


@dataclass
class Dataset:
    inputs: np.ndarray  # [count, *sample_shape] float32
    labels: np.ndarray  # [count] int64
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.split)


@dataclass
class DatasetPair:
    train: Dataset
    val: Dataset


def _atomic_write(path: str, blob: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(inputs: np.ndarray, labels: np.ndarray, n_train: int | None = None) -> bytes:
    inputs = np.ascontiguousarray(inputs, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<i4")
    count = len(labels)
    n_train = count if n_train is None else n_train
    dims = inputs.shape[1:]
    head = MAGIC + struct.pack(f"<IIII{len(dims)}I", VERSION, count, n_train, len(dims), *dims)
    return head + inputs.tobytes() + labels.tobytes()


def decode(blob: bytes) -> tuple:
    """Returns (inputs, labels, n_train)."""
    if blob[:4] != MAGIC:
        raise ParseError("not a GOSD container (bad magic)")
    try:
        version, count, n_train, ndim = struct.unpack_from("<IIII", blob, 4)
        if version != VERSION:
            raise ParseError(f"unsupported GOSD version {version}")
        dims = struct.unpack_from(f"<{ndim}I", blob, 20)
        off = 20 + 4 * ndim
        n_vals = count * int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(blob, dtype="<f4", count=n_vals, offset=off)
        labels = np.frombuffer(blob, dtype="<i4", count=count, offset=off + 4 * n_vals)
    except (struct.error, ValueError) as exc:
        raise ParseError(f"truncated GOSD container: {exc}") from None
    if n_train > count:
        raise ParseError("train count exceeds sample count")
    return data.reshape((count,) + tuple(dims)).astype(np.float32), labels.astype(np.int64), n_train


def save_pair(pair: DatasetPair, path: str) -> None:
    inputs = np.concatenate([pair.train.inputs, pair.val.inputs])
    labels = np.concatenate([pair.train.labels, pair.val.labels])
    _atomic_write(path, encode(inputs, labels, len(pair.train)))


def load_pair(path: str) -> DatasetPair:
    with open(path, "rb") as f:
        inputs, labels, n_train = decode(f.read())
    return DatasetPair(Dataset(inputs[:n_train], labels[:n_train], "train"),
                       Dataset(inputs[n_train:], labels[n_train:], "val"))


def save_blob(values: np.ndarray, path: str) -> None:
    """Flat float32 vector stored as a single-sample container."""
    _atomic_write(path, encode(values.reshape(1, -1), np.zeros(1, np.int32)))


def load_blob(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        inputs, _, _ = decode(f.read())
    return inputs.reshape(-1)


# -- synthetic patterns --------------------------------------------------------

SIZE = 16
NOISE = 0.1


def _blob(rng, yy, xx):
    cy, cx = rng.uniform(4, 12, size=2)
    s = rng.uniform(1.8, 3.5)
    return 2.0 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s)) - 1.0


def _stripes(rng, yy, xx):
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)


def _checkers(rng, yy, xx):
    cell = rng.integers(2, 5)
    oy, ox = rng.integers(0, cell, size=2)
    return np.where(((yy + oy) // cell + (xx + ox) // cell) % 2 == 0, 1.0, -1.0)


PATTERNS = (_blob, _stripes, _checkers)


def synthetic(seed: int, n_train: int = 1800, n_val: int = 600) -> DatasetPair:
    """Balanced 3-class 1x16x16 pattern set (blobs, stripes, checkers)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)

    def make(n):
        labels = np.arange(n) % len(PATTERNS)
        labels = labels[rng.permutation(n)]
        imgs = np.empty((n, 1, SIZE, SIZE), np.float32)
        for i, c in enumerate(labels):
            img = PATTERNS[c](rng, yy, xx) + rng.normal(0, NOISE, (SIZE, SIZE))
            imgs[i, 0] = img
        return imgs, labels.astype(np.int64)

    tx, ty = make(n_train)
    vx, vy = make(n_val)
    return DatasetPair(Dataset(tx, ty, "train"), Dataset(vx, vy, "val"))
