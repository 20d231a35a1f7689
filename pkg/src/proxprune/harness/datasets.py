"""Synthetic dataset generators and a small binary tensor file format.

Tensor file layout (all little-endian)::

    magic   4 bytes  b"PPTN"
    dtype   1 byte   b"f" float32 | b"d" float64 | b"i" int64
    ndim    1 byte
    pad     2 bytes  zero
    shape   ndim x uint64
    data    row-major

A dataset file holds two tensors back to back: inputs, then labels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from ..model_engine import Dataset

MAGIC = b"PPTN"
_DTYPES = {b"f": "<f4", b"d": "<f8", b"i": "<i8"}
_CODES = {np.dtype("<f4"): b"f", np.dtype("<f8"): b"d", np.dtype("<i8"): b"i"}


class DatasetFormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, a: np.ndarray) -> None:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        a = a.astype("<f8") if a.dtype.itemsize == 8 else a.astype("<f4")
    elif a.dtype.kind in "iu":
        a = a.astype("<i8")
    else:
        raise DatasetFormatError(f"unsupported dtype {a.dtype}")
    f.write(MAGIC + _CODES[a.dtype] + struct.pack("<B", a.ndim) + b"\0\0")
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(np.ascontiguousarray(a).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise DatasetFormatError("truncated tensor file")
    return b


def read_tensor(f: BinaryIO) -> np.ndarray:
    head = _read_exact(f, 8)
    if head[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {head[:4]!r}")
    dtype = _DTYPES.get(head[4:5])
    if dtype is None:
        raise DatasetFormatError(f"unknown dtype code {head[4:5]!r}")
    ndim = head[5]
    shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = _read_exact(f, count * np.dtype(dtype).itemsize)
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def save_dataset(path, data: Dataset) -> None:
    with open(path, "wb") as f:
        write_tensor(f, data.inputs)
        write_tensor(f, data.labels)


def load_dataset_file(path, split: str, n_classes: int = 0) -> Dataset:
    with open(path, "rb") as f:
        inputs = read_tensor(f)
        labels = read_tensor(f)
        if f.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes after labels")
    if labels.dtype.kind == "i" and not n_classes:
        n_classes = int(labels.max()) + 1 if len(labels) else 0
    try:
        return Dataset(inputs.astype(np.float64), labels, split, n_classes)
    except ValueError as err:
        raise DatasetFormatError(f"{path}: {err}") from err


# ---------------------------------------------------------------------------
# generators


@dataclass
class DataSpec:
    generator: str = "planted"
    n_features: int = 64
    n_informative: int = 8
    n_classes: int = 4
    n_train: int = 2000
    n_test: int = 1000
    noise: float = 0.0
    hidden: int = 16
    n_outputs: int = 4
    shape: str = ""
    path_train: str = ""
    path_test: str = ""
    seed: int = 0


GENERATORS = ("planted", "moons", "teacher", "linear", "file")


def _planted(spec: DataSpec, rng, n):
    # informative coordinates and teacher drawn first so both splits share them
    idx = np.sort(rng.choice(spec.n_features, spec.n_informative, replace=False))
    teacher = rng.normal(size=(spec.n_informative, spec.n_classes))
    x = rng.normal(size=(n, spec.n_features))
    logits = x[:, idx] @ teacher + spec.noise * rng.normal(size=(n, spec.n_classes))
    meta = {"informative": idx.tolist(), "teacher": teacher.tolist()}
    return x, np.argmax(logits, axis=1).astype(np.int64), meta


def _moons(spec: DataSpec, rng, n):
    angle = rng.uniform(0, np.pi, size=n)
    y = rng.integers(0, 2, size=n)
    pts = np.where(
        y[:, None] == 0,
        np.stack([np.cos(angle), np.sin(angle)], 1),
        np.stack([1 - np.cos(angle), 0.5 - np.sin(angle)], 1),
    )
    pts = pts + spec.noise * rng.normal(size=pts.shape)
    extra = rng.normal(size=(n, max(spec.n_features - 2, 0)))
    return np.concatenate([pts, extra], 1), y.astype(np.int64), {"informative": [0, 1]}


def _teacher(spec: DataSpec, rng, n):
    w1 = rng.normal(size=(spec.hidden, spec.n_features)) / np.sqrt(spec.n_features)
    w2 = rng.normal(size=(spec.n_classes, spec.hidden)) / np.sqrt(spec.hidden)
    x = rng.normal(size=(n, spec.n_features))
    logits = np.maximum(x @ w1.T, 0) @ w2.T + spec.noise * rng.normal(size=(n, spec.n_classes))
    return x, np.argmax(logits, axis=1).astype(np.int64), {}


def _linear(spec: DataSpec, rng, n):
    # least-squares targets from a matrix with planted zero columns
    idx = np.sort(rng.choice(spec.n_features, spec.n_informative, replace=False))
    a = np.zeros((spec.n_outputs, spec.n_features))
    a[:, idx] = rng.normal(size=(spec.n_outputs, spec.n_informative))
    x = rng.normal(size=(n, spec.n_features))
    y = x @ a.T + spec.noise * rng.normal(size=(n, spec.n_outputs))
    return x, y, {"informative": idx.tolist(), "teacher": a.tolist()}


def generate(spec: DataSpec) -> tuple[Dataset, Dataset]:
    """Deterministic train/test pair for ``spec``.

    The generator state is seeded once; the train split is drawn before the
    test split, and both share any planted structure.
    """
    if spec.generator == "file":
        if not spec.path_train or not spec.path_test:
            raise ValueError("file datasets need path_train and path_test")
        train = load_dataset_file(spec.path_train, "train")
        test = load_dataset_file(spec.path_test, "test", train.n_classes)
        return _reshape(train, spec), _reshape(test, spec)
    makers = {"planted": _planted, "moons": _moons, "teacher": _teacher, "linear": _linear}
    if spec.generator not in makers:
        raise ValueError(f"unknown generator {spec.generator!r}; choose from {GENERATORS}")
    n_total = spec.n_train + spec.n_test
    x, y, meta = makers[spec.generator](spec, np.random.default_rng(spec.seed), n_total)
    n_classes = 0 if spec.generator == "linear" else (2 if spec.generator == "moons" else spec.n_classes)
    meta = {**meta, "generator": spec.generator}
    train = Dataset(x[: spec.n_train], y[: spec.n_train], "train", n_classes, meta)
    test = Dataset(x[spec.n_train:], y[spec.n_train:], "test", n_classes, meta)
    return _reshape(train, spec), _reshape(test, spec)


def parse_shape(text: str) -> Optional[tuple[int, ...]]:
    if not text:
        return None
    return tuple(int(p) for p in text.lower().split("x"))


def _reshape(data: Dataset, spec: DataSpec) -> Dataset:
    shape = parse_shape(spec.shape)
    if shape is None:
        return data
    inputs = data.inputs.reshape((len(data),) + shape)
    return Dataset(inputs, data.labels, data.split, data.n_classes, data.meta)


def load_dataset(spec: DataSpec) -> tuple[Dataset, Dataset]:
    return generate(spec)
