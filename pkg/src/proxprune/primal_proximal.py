"""Alternating primal / proximal / dual iterations for joint row+column pruning.

Each iteration:

1. primal: Adam epochs on ``loss(W) + rho/2 ||W - B1||^2 + rho/2 ||W - B2||^2``
   with ``B1 = X - Lam/rho`` and ``B2 = Y - Gam/rho``;
2. proximal: ``X = rowprox(W + Lam/rho, lam/rho)``, ``Y = colprox(W + Gam/rho, lam/rho)``;
3. dual: ``Lam += rho (W - X)``, ``Gam += rho (W - Y)``.

The auxiliary ``X`` (row-sparse) and ``Y`` (column-sparse) carry exact zeros
that later decide which rows and columns are removed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DivergenceError
from .model_engine import Dataset, Model, OptimState, run_epoch
from .prox_ops import col_group_prox, row_group_prox
from .tensor_core import (
    WeightCollection,
    col_l2_norms,
    collection_distance,
    collection_norm,
    row_l2_norms,
)


@dataclass
class HyperParams:
    lam: float = 1e-7
    rho: float = 1e-3
    T: int = 300
    primal_epochs: int = 1
    lr: float = 1e-4
    zero_epsilon: float = 0.0
    retrain_epochs: int = 300
    batch_size: int = 64
    reset_adam: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (self.lam >= 0 and self.rho > 0):
            raise ValueError("lam must be non-negative and rho positive")
        if not np.isfinite(self.lam / self.rho):
            raise ValueError("lam / rho must be finite")
        if self.T < 0 or self.primal_epochs < 1 or self.retrain_epochs < 0:
            raise ValueError("T >= 0, primal_epochs >= 1 and retrain_epochs >= 0 required")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive")
        if self.zero_epsilon < 0:
            raise ValueError("zero_epsilon must be non-negative")

    @property
    def threshold(self) -> float:
        return self.lam / self.rho


@dataclass
class PrunerState:
    w: Model
    x: WeightCollection
    y: WeightCollection
    lam: WeightCollection
    gam: WeightCollection
    t: int = 0
    opt: OptimState = field(default_factory=OptimState)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


@dataclass
class IterationMetrics:
    t: int
    train_loss: float
    consensus_x: float
    consensus_y: float
    zero_rows: dict
    zero_cols: dict
    penalty: float

    def to_dict(self) -> dict:
        return asdict(self)


Observer = Callable[[IterationMetrics, PrunerState], None]


def init_state(pretrained: Model, hp: HyperParams) -> PrunerState:
    """X = Y = copies of W, zero duals, t = 0."""
    w = pretrained.copy()
    return PrunerState(
        w=w,
        x=w.weights.copy(),
        y=w.weights.copy(),
        lam=WeightCollection.zeros_like(w.weights),
        gam=WeightCollection.zeros_like(w.weights),
        t=0,
        opt=OptimState(lr=hp.lr),
        rng=np.random.default_rng(hp.seed),
    )


def consensus_gradient(state: PrunerState, rho: float) -> dict[str, np.ndarray]:
    """Gradient of the two quadratic consensus terms w.r.t. each weight matrix.

    ``rho (W - B1) + rho (W - B2)`` written without dividing by ``rho``.
    """
    out = {}
    for lid, w in state.w.weights.items():
        out[lid] = rho * (2.0 * w - state.x[lid] - state.y[lid]) + state.lam[lid] + state.gam[lid]
    return out


def primal_step(state: PrunerState, data: Dataset, hp: HyperParams) -> float:
    """Update W in place; returns the mean training loss of the last epoch."""
    if hp.reset_adam:
        state.opt = OptimState(lr=hp.lr)
    loss = float("nan")
    for _ in range(hp.primal_epochs):
        loss = run_epoch(
            state.w, data, state.opt, state.rng, hp.batch_size,
            extra_weight_grad=lambda model: consensus_gradient(state, hp.rho),
        )
    return loss


def proximal_step(state: PrunerState, hp: HyperParams) -> None:
    t = hp.threshold
    inv = 1.0 / hp.rho
    for lid, w in state.w.weights.items():
        state.x[lid] = row_group_prox(w + inv * state.lam[lid], t)
        state.y[lid] = col_group_prox(w + inv * state.gam[lid], t)


def dual_step(state: PrunerState, hp: HyperParams) -> None:
    for lid, w in state.w.weights.items():
        state.lam[lid] = state.lam[lid] + hp.rho * (w - state.x[lid])
        state.gam[lid] = state.gam[lid] + hp.rho * (w - state.y[lid])


def _relative(dist: float, ref: float) -> float:
    return dist / ref if ref > 0 else dist


def iteration_metrics(state: PrunerState, train_loss: float) -> IterationMetrics:
    wn = collection_norm(state.w.weights)
    penalty = 0.0
    zero_rows, zero_cols = {}, {}
    for lid in state.x:
        rn = row_l2_norms(state.x[lid])
        cn = col_l2_norms(state.y[lid])
        zero_rows[lid] = int(np.sum(rn == 0.0))
        zero_cols[lid] = int(np.sum(cn == 0.0))
        penalty += float(rn.sum() + cn.sum())
    return IterationMetrics(
        t=state.t,
        train_loss=float(train_loss),
        consensus_x=_relative(collection_distance(state.w.weights, state.x), wn),
        consensus_y=_relative(collection_distance(state.w.weights, state.y), wn),
        zero_rows=zero_rows,
        zero_cols=zero_cols,
        penalty=penalty,
    )


def iterate(state: PrunerState, data: Dataset, hp: HyperParams) -> IterationMetrics:
    """One primal -> proximal -> dual round."""
    if state.t >= hp.T:
        raise ValueError(f"already ran {state.t} of {hp.T} iterations")
    loss = primal_step(state, data, hp)
    proximal_step(state, hp)
    dual_step(state, hp)
    state.t += 1
    return iteration_metrics(state, loss)


def run(
    pretrained: Model,
    data: Dataset,
    hp: HyperParams,
    observer: Optional[Observer] = None,
) -> tuple[PrunerState, list[IterationMetrics]]:
    """Run exactly ``hp.T`` iterations from ``pretrained``.

    On divergence the raised :class:`DivergenceError` carries the metrics
    gathered so far as ``err.history``.
    """
    state = init_state(pretrained, hp)
    history: list[IterationMetrics] = []
    while state.t < hp.T:
        try:
            m = iterate(state, data, hp)
        except DivergenceError as err:
            err.history = history
            err.iteration = state.t + 1
            raise
        history.append(m)
        if observer is not None:
            observer(m, state)
    return state, history
