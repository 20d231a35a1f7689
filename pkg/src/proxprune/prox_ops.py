"""Group soft-thresholding for row- and column-sparse proximal updates.

For a group ``g`` and threshold ``t`` the proximal map of ``t * ||.||_2`` is
``(1 - t / ||g||) * g`` when ``||g|| > t`` and the zero vector otherwise.  Rows
are the groups for :func:`row_group_prox`, columns for :func:`col_group_prox`.

:func:`prox_oracle` solves the same problem by bounded scalar search and exists
only to cross-check the closed form.
"""
from __future__ import annotations

from typing import Literal

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ShapeMismatchError
from .tensor_core import as_matrix, col_l2_norms, row_l2_norms

Axis = Literal["row", "col"]


def _check_threshold(threshold: float) -> float:
    threshold = float(threshold)
    if not np.isfinite(threshold) or threshold < 0:
        raise ValueError(f"threshold must be finite and non-negative, got {threshold}")
    return threshold


def _shrink_factors(norms: np.ndarray, threshold: float) -> np.ndarray:
    # norm == threshold and norm == 0 both map to an exact zero group
    factors = np.zeros_like(norms)
    keep = norms > threshold
    factors[keep] = 1.0 - threshold / norms[keep]
    return factors


def row_group_prox(c: np.ndarray, threshold: float) -> np.ndarray:
    """Shrink each row of ``c`` towards zero by ``threshold`` in Euclidean norm.

    Parameters
    ----------
    c : (rows, cols) array
        Point at which the proximal map is evaluated.
    threshold : float
        Non-negative shrinkage amount, ``lambda / rho`` in the pruner.

    Returns
    -------
    ndarray
        Same shape as ``c``.  Rows whose norm does not exceed ``threshold`` are
        exactly zero.
    """
    c = as_matrix(c)
    threshold = _check_threshold(threshold)
    if threshold == 0.0:
        return c.copy()
    return c * _shrink_factors(row_l2_norms(c), threshold)[:, None]


def col_group_prox(c: np.ndarray, threshold: float) -> np.ndarray:
    """Column-wise counterpart of :func:`row_group_prox`."""
    c = as_matrix(c)
    threshold = _check_threshold(threshold)
    if threshold == 0.0:
        return c.copy()
    return c * _shrink_factors(col_l2_norms(c), threshold)[None, :]


def group_prox(c: np.ndarray, threshold: float, axis: Axis) -> np.ndarray:
    if axis == "row":
        return row_group_prox(c, threshold)
    if axis == "col":
        return col_group_prox(c, threshold)
    raise ValueError(f"axis must be 'row' or 'col', got {axis!r}")


def prox_objective(x, c, lam: float, rho: float, axis: Axis) -> float:
    """Sum of group norms of ``x`` plus ``rho / (2 lam) * ||x - c||_F^2``."""
    x = as_matrix(x)
    c = as_matrix(c)
    if x.shape != c.shape:
        raise ShapeMismatchError(f"shape mismatch: {x.shape} vs {c.shape}")
    if lam <= 0 or rho <= 0:
        raise ValueError("lam and rho must be positive")
    if axis == "row":
        groups = row_l2_norms(x).sum()
    elif axis == "col":
        groups = col_l2_norms(x).sum()
    else:
        raise ValueError(f"axis must be 'row' or 'col', got {axis!r}")
    d = x - c
    return float(groups + rho / (2.0 * lam) * np.sum(d * d))


def _oracle_scale(norm: float, threshold: float) -> float:
    # The minimiser of t*||s g|| + 0.5*||s g - g||^2 is s*g with s in [0, 1];
    # search that scalar directly.
    def f(s):
        return threshold * s * norm + 0.5 * (1.0 - s) ** 2 * norm * norm

    res = minimize_scalar(f, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-12})
    best = float(res.x)
    for s in (0.0, 1.0):
        if f(s) <= f(best):
            best = s
    return best


def prox_oracle(c: np.ndarray, threshold: float, axis: Axis) -> np.ndarray:
    """Brute-force group prox by 1-D search over each group's scale factor.

    Slow; meant for matrices up to roughly 16x16.
    """
    c = as_matrix(c)
    threshold = _check_threshold(threshold)
    if axis not in ("row", "col"):
        raise ValueError(f"axis must be 'row' or 'col', got {axis!r}")
    work = c if axis == "row" else c.T
    out = np.zeros_like(work)
    for p in range(work.shape[0]):
        g = work[p]
        norm = float(np.sqrt(np.dot(g, g)))
        if norm == 0.0 or threshold == 0.0:
            out[p] = g
            continue
        out[p] = _oracle_scale(norm, threshold) * g
    return np.ascontiguousarray(out if axis == "row" else out.T)
