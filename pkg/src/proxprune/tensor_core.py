"""Dense matrix helpers and the row/column group norms used by the pruner.

Matrices are plain 2-D ``float64`` numpy arrays in C (row-major) order.  A
:class:`WeightCollection` is an ordered mapping from layer id to matrix.
"""
from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from .errors import ShapeMismatchError


def as_matrix(a) -> np.ndarray:
    """Return ``a`` as a C-contiguous 2-D float64 array (copying only if needed)."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def row_l2_norms(m: np.ndarray) -> np.ndarray:
    """Euclidean norm of every row; length ``rows`` (empty for an empty matrix)."""
    m = as_matrix(m)
    if m.shape[1] == 0:
        return np.zeros(m.shape[0])
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def col_l2_norms(m: np.ndarray) -> np.ndarray:
    """Euclidean norm of every column; length ``cols``."""
    m = as_matrix(m)
    if m.shape[0] == 0:
        return np.zeros(m.shape[1])
    return np.sqrt(np.einsum("ij,ij->j", m, m))


def frobenius_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(np.sum(d * d)))


class WeightCollection:
    """Ordered ``layer_id -> matrix`` mapping.

    Layer ids are unique and their order is fixed at construction.  Matrices
    may be replaced in place but must keep their shape.
    """

    def __init__(self, layers=()):
        self._layers: dict[str, np.ndarray] = {}
        items = layers.items() if isinstance(layers, dict) else layers
        for layer_id, m in items:
            if layer_id in self._layers:
                raise ValueError(f"duplicate layer id {layer_id!r}")
            self._layers[layer_id] = as_matrix(m)

    def __getitem__(self, layer_id: str) -> np.ndarray:
        return self._layers[layer_id]

    def __setitem__(self, layer_id: str, m) -> None:
        if layer_id not in self._layers:
            raise KeyError(layer_id)
        m = as_matrix(m)
        if m.shape != self._layers[layer_id].shape:
            raise ShapeMismatchError(
                f"layer {layer_id!r}: shape {self._layers[layer_id].shape} cannot become {m.shape}"
            )
        self._layers[layer_id] = m

    def __iter__(self) -> Iterator[str]:
        return iter(self._layers)

    def __len__(self) -> int:
        return len(self._layers)

    def __contains__(self, layer_id) -> bool:
        return layer_id in self._layers

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {v.shape}" for k, v in self._layers.items())
        return f"WeightCollection({shapes})"

    def ids(self) -> list[str]:
        return list(self._layers)

    def items(self):
        return self._layers.items()

    def values(self):
        return self._layers.values()

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: v.shape for k, v in self._layers.items()}

    def copy(self) -> "WeightCollection":
        return WeightCollection((k, v.copy()) for k, v in self._layers.items())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "WeightCollection":
        return WeightCollection((k, fn(v)) for k, v in self._layers.items())

    def zip_map(self, other: "WeightCollection", fn) -> "WeightCollection":
        check_same_layout(self, other)
        return WeightCollection((k, fn(v, other[k])) for k, v in self._layers.items())

    @classmethod
    def zeros_like(cls, other: "WeightCollection") -> "WeightCollection":
        return cls((k, np.zeros_like(v)) for k, v in other.items())


def check_same_layout(a: WeightCollection, b: WeightCollection) -> None:
    if a.ids() != b.ids():
        raise ShapeMismatchError(f"layer ids differ: {a.ids()} vs {b.ids()}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ShapeMismatchError(f"layer {k!r}: {a[k].shape} vs {b[k].shape}")


def group_penalty(w: WeightCollection) -> float:
    """Unscaled row+column group-lasso penalty summed over layers.

    The caller multiplies by the regularisation strength.
    """
    total = 0.0
    for m in w.values():
        total += float(row_l2_norms(m).sum() + col_l2_norms(m).sum())
    return total


def collection_norm(w: WeightCollection) -> float:
    """Frobenius norm of all layers taken together."""
    return float(np.sqrt(sum(float(np.sum(m * m)) for m in w.values())))


def collection_distance(a: WeightCollection, b: WeightCollection) -> float:
    check_same_layout(a, b)
    return float(np.sqrt(sum(frobenius_distance(a[k], b[k]) ** 2 for k in a)))
