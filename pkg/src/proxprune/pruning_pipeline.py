"""From a converged pruner state to a compact, retrained model.

A weight survives only if both its row (judged on ``X``) and its column
(judged on ``Y``) survive.  Removal is a mask during retraining; the compact
kept-rows x kept-cols matrices are produced by :func:`compact_weights` and are
what checkpoints store.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import EmptyLayerError, ShapeMismatchError
from .model_engine import (
    Dataset,
    LOSS_KINDS,
    Model,
    conv2d_gemm,
    evaluate,
    im2col,
    train_model,
)
from .primal_proximal import HyperParams, PrunerState
from .tensor_core import WeightCollection, col_l2_norms, row_l2_norms


@dataclass
class SparsityMask:
    row_keep: dict[str, np.ndarray]
    col_keep: dict[str, np.ndarray]

    def __post_init__(self):
        if list(self.row_keep) != list(self.col_keep):
            raise ShapeMismatchError("row and column masks cover different layers")
        self.row_keep = {k: np.asarray(v, dtype=bool) for k, v in self.row_keep.items()}
        self.col_keep = {k: np.asarray(v, dtype=bool) for k, v in self.col_keep.items()}

    @classmethod
    def all_keep(cls, weights: WeightCollection) -> "SparsityMask":
        return cls(
            {k: np.ones(m.shape[0], bool) for k, m in weights.items()},
            {k: np.ones(m.shape[1], bool) for k, m in weights.items()},
        )

    def layer_ids(self) -> list[str]:
        return list(self.row_keep)

    def element(self, layer_id: str) -> np.ndarray:
        return np.outer(self.row_keep[layer_id], self.col_keep[layer_id])

    def kept(self, layer_id: str) -> tuple[int, int]:
        return int(self.row_keep[layer_id].sum()), int(self.col_keep[layer_id].sum())

    def remaining(self, layer_id: str) -> int:
        r, c = self.kept(layer_id)
        return r * c

    def drops_superset_of(self, other: "SparsityMask") -> bool:
        return all(
            not np.any(self.row_keep[k] & ~other.row_keep[k])
            and not np.any(self.col_keep[k] & ~other.col_keep[k])
            for k in self.row_keep
        )

    def to_dict(self) -> dict:
        return {
            "row_keep": {k: v.astype(int).tolist() for k, v in self.row_keep.items()},
            "col_keep": {k: v.astype(int).tolist() for k, v in self.col_keep.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparsityMask":
        return cls(d["row_keep"], d["col_keep"])


def mask_from_groups(rows_from: WeightCollection, cols_from: WeightCollection,
                     epsilon: float = 0.0) -> SparsityMask:
    """Drop a row (col) when its norm is at most ``epsilon * (1 + ||layer||_F)``."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    row_keep, col_keep = {}, {}
    for lid in rows_from:
        xr, yc = rows_from[lid], cols_from[lid]
        row_keep[lid] = row_l2_norms(xr) > epsilon * (1.0 + np.linalg.norm(xr))
        col_keep[lid] = col_l2_norms(yc) > epsilon * (1.0 + np.linalg.norm(yc))
    return SparsityMask(row_keep, col_keep)


def extract_mask(state: PrunerState, epsilon: float = 0.0) -> SparsityMask:
    """Rows from the zero pattern of ``X``, columns from that of ``Y``.

    ``epsilon == 0`` keeps exactly the groups the proximal step left non-zero.
    """
    return mask_from_groups(state.x, state.y, epsilon)


def check_nonempty(mask: SparsityMask) -> None:
    for lid in mask.layer_ids():
        r, c = mask.kept(lid)
        if r == 0 or c == 0:
            raise EmptyLayerError(lid)


def apply_mask(model: Model, mask: SparsityMask) -> Model:
    """Copy of ``model`` with masked weights (and biases of dropped rows) set to 0."""
    if mask.layer_ids() != model.weights.ids():
        raise ShapeMismatchError(f"mask layers {mask.layer_ids()} != model layers {model.weights.ids()}")
    for lid, w in model.weights.items():
        if mask.row_keep[lid].shape != (w.shape[0],) or mask.col_keep[lid].shape != (w.shape[1],):
            raise ShapeMismatchError(f"mask for {lid!r} does not match weight shape {w.shape}")
    check_nonempty(mask)
    out = model.copy()
    for lid in out.weights:
        out.weights[lid] = np.where(mask.element(lid), out.weights[lid], 0.0)
        if lid in out.biases:
            out.biases[lid] = np.where(mask.row_keep[lid], out.biases[lid], 0.0)
    out.mask = mask
    return out


def _freeze(mask: SparsityMask) -> Callable[[dict], None]:
    elems = {lid: mask.element(lid) for lid in mask.layer_ids()}

    def filt(g: dict) -> None:
        for lid, e in elems.items():
            g[f"W:{lid}"] = g[f"W:{lid}"] * e
            if f"b:{lid}" in g:
                g[f"b:{lid}"] = g[f"b:{lid}"] * mask.row_keep[lid]

    return filt


def assert_mask_respected(model: Model) -> None:
    mask = model.mask
    for lid, w in model.weights.items():
        if np.any(w[~mask.element(lid)] != 0.0):
            raise AssertionError(f"masked weights of {lid!r} are non-zero")


def retrain(model: Model, data: Dataset, hp: HyperParams,
            on_epoch: Optional[Callable[[int, float, Model], None]] = None) -> Model:
    """Adam fine-tuning of the surviving weights; masked entries stay exactly 0.

    The mask is re-checked after every epoch.
    """
    if model.mask is None:
        raise ValueError("retrain needs a masked model (see apply_mask)")

    def epoch_done(epoch, loss):
        assert_mask_respected(model)
        if on_epoch is not None:
            on_epoch(epoch, loss, model)

    return train_model(model, data, hp.retrain_epochs, hp.lr, hp.batch_size, hp.seed,
                       grad_filter=_freeze(model.mask), on_epoch=epoch_done)


# ---------------------------------------------------------------------------
# compact (hard-removed) representation


def compact_weights(model: Model, mask: SparsityMask) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """``layer_id -> (kept_rows_idx, kept_cols_idx, dense kept submatrix)``."""
    out = {}
    for lid, w in model.weights.items():
        r = np.flatnonzero(mask.row_keep[lid])
        c = np.flatnonzero(mask.col_keep[lid])
        out[lid] = (r, c, np.ascontiguousarray(w[np.ix_(r, c)]))
    return out


def compact_predict(model: Model, mask: SparsityMask, inputs) -> np.ndarray:
    """Logits computed with the physically smaller matrices only."""
    packed = compact_weights(model, mask)
    x = np.asarray(inputs, dtype=np.float64)
    for lid, s in zip(model.layer_ids, model.specs):
        if s.kind in LOSS_KINDS:
            break
        if s.kind == "dense":
            r, c, wc = packed[lid]
            y = np.zeros((x.shape[0], s.out_features))
            y[:, r] = x[:, c] @ wc.T
            if lid in model.biases:
                y[:, r] += model.biases[lid][r]
            x = y
        elif s.kind == "conv2d":
            r, c, wc = packed[lid]
            n, _, h, w = x.shape
            cols = im2col(x, s.kernel_h, s.kernel_w, s.stride, s.padding)[:, c]
            oh = (h + 2 * s.padding - s.kernel_h) // s.stride + 1
            ow = (w + 2 * s.padding - s.kernel_w) // s.stride + 1
            y = np.zeros((cols.shape[0], s.out_channels))
            y[:, r] = cols @ wc.T
            if lid in model.biases:
                y[:, r] += model.biases[lid][r]
            x = y.reshape(n, oh, ow, s.out_channels).transpose(0, 3, 1, 2)
        elif s.kind == "relu":
            x = np.maximum(x, 0.0)
        elif s.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
    return x


# ---------------------------------------------------------------------------
# accounting


def dead_channel_diagnostics(model: Model, mask: SparsityMask) -> dict[str, dict]:
    """Cross-layer inconsistencies left in place (no propagation is done).

    For each consecutive pair of prunable layers: kept columns of the later
    layer that only read outputs of dropped rows, and kept rows of the earlier
    layer whose outputs feed only dropped columns.
    """
    prunable = [(k, lid, s) for k, (lid, s) in enumerate(zip(model.layer_ids, model.specs)) if lid]
    out = {}
    for (k0, lid0, s0), (k1, lid1, s1) in zip(prunable, prunable[1:]):
        n_units = model.specs[k0].weight_shape()[0]
        cols = s1.weight_shape()[1]
        # which upstream unit each downstream column reads
        per_unit = cols // n_units
        owner = np.repeat(np.arange(n_units), per_unit)
        if len(owner) != cols:
            continue
        row_alive = mask.row_keep[lid0]
        col_keep = mask.col_keep[lid1]
        dead_cols = int(np.sum(col_keep & ~row_alive[owner]))
        used = np.zeros(n_units, bool)
        np.logical_or.at(used, owner, col_keep)
        unused_rows = int(np.sum(row_alive & ~used))
        out[lid1] = {"upstream": lid0, "kept_cols_reading_dead_rows": dead_cols,
                     "upstream_kept_rows_unused": unused_rows}
    return out


@dataclass
class LayerCount:
    layer_id: str
    rows: int
    cols: int
    kept_rows: int
    kept_cols: int
    total: int
    remaining: int

    @property
    def rate(self) -> float:
        return self.total / self.remaining if self.remaining else float("inf")


@dataclass
class CompressionReport:
    """Parameter accounting over prunable matrices plus accuracy checkpoints.

    ``remaining`` per layer is ``kept_rows * kept_cols``; the overall rate is
    total prunable parameters over remaining ones.
    """

    method: str
    layers: list[LayerCount]
    base_accuracy: Optional[float] = None
    masked_accuracy: Optional[float] = None
    pruned_accuracy: Optional[float] = None
    pruning_epochs: int = 0
    retrain_epochs: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(l.total for l in self.layers)

    @property
    def remaining(self) -> int:
        return sum(l.remaining for l in self.layers)

    @property
    def compression_rate(self) -> float:
        return self.total / self.remaining if self.remaining else float("inf")

    @property
    def epochs_used(self) -> int:
        return self.pruning_epochs + self.retrain_epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        d["remaining"] = self.remaining
        d["compression_rate"] = self.compression_rate
        d["epochs_used"] = self.epochs_used
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionReport":
        d = dict(d)
        for derived in ("total", "remaining", "compression_rate", "epochs_used"):
            d.pop(derived, None)
        d["layers"] = [LayerCount(**l) for l in d["layers"]]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CompressionReport":
        return cls.from_dict(json.loads(text))


def layer_counts(weights: WeightCollection, mask: SparsityMask) -> list[LayerCount]:
    out = []
    for lid, w in weights.items():
        kr, kc = mask.kept(lid)
        out.append(LayerCount(lid, w.shape[0], w.shape[1], kr, kc, w.size, kr * kc))
    return out


def compression_report(
    model: Model,
    mask: SparsityMask,
    eval_data: Optional[Dataset] = None,
    method: str = "primal-proximal",
    base_accuracy: Optional[float] = None,
    masked_accuracy: Optional[float] = None,
    pruning_epochs: int = 0,
    retrain_epochs: int = 0,
) -> CompressionReport:
    acc = None
    if eval_data is not None and model.loss_kind == "softmax-xent-loss":
        acc = evaluate(model, eval_data)["accuracy"]
    return CompressionReport(
        method=method,
        layers=layer_counts(model.weights, mask),
        base_accuracy=base_accuracy,
        masked_accuracy=masked_accuracy,
        pruned_accuracy=acc,
        pruning_epochs=pruning_epochs,
        retrain_epochs=retrain_epochs,
        diagnostics=dead_channel_diagnostics(model, mask),
    )


def _accuracy(model: Model, data: Optional[Dataset]) -> Optional[float]:
    if data is None or model.loss_kind != "softmax-xent-loss":
        return None
    return evaluate(model, data)["accuracy"]


def finish(
    state_model: Model,
    mask: SparsityMask,
    train: Dataset,
    hp: HyperParams,
    eval_data: Optional[Dataset],
    method: str,
    base_accuracy: Optional[float],
    on_retrain_epoch=None,
) -> tuple[Model, CompressionReport]:
    """Hard-prune, retrain and account; shared by both pruning methods."""
    pruned = apply_mask(state_model, mask)
    masked_acc = _accuracy(pruned, eval_data)
    retrain(pruned, train, hp, on_epoch=on_retrain_epoch)
    report = compression_report(pruned, mask, eval_data, method, base_accuracy, masked_acc,
                                pruning_epochs=hp.T * hp.primal_epochs,
                                retrain_epochs=hp.retrain_epochs)
    return pruned, report


# ---------------------------------------------------------------------------
# direct group-lasso training (the equal-penalty baseline)


def group_subgradient(w: np.ndarray) -> np.ndarray:
    """Subgradient of ``sum_p ||row_p|| + sum_q ||col_q||``; zero groups contribute 0."""
    rn = row_l2_norms(w)
    cn = col_l2_norms(w)
    rs = np.divide(1.0, rn, out=np.zeros_like(rn), where=rn > 0)
    cs = np.divide(1.0, cn, out=np.zeros_like(cn), where=cn > 0)
    return w * rs[:, None] + w * cs[None, :]


def _breakpoints(weights: WeightCollection) -> np.ndarray:
    vals = []
    for w in weights.values():
        scale = 1.0 + np.linalg.norm(w)
        vals.append(row_l2_norms(w) / scale)
        vals.append(col_l2_norms(w) / scale)
    return np.unique(np.concatenate(vals + [np.zeros(1)]))


def match_epsilon(weights: WeightCollection, target_rate: float) -> float:
    """Group-norm cut whose compression rate is closest to ``target_rate``.

    Candidates are the exact breakpoints of the ``epsilon`` rule; cuts that
    would empty a layer are skipped.
    """
    best, best_gap = 0.0, float("inf")
    for eps in _breakpoints(weights):
        mask = mask_from_groups(weights, weights, float(eps))
        try:
            check_nonempty(mask)
        except EmptyLayerError:
            break
        rate = sum(w.size for w in weights.values()) / sum(mask.remaining(k) for k in weights)
        gap = abs(np.log(rate / target_rate))
        if gap < best_gap:
            best, best_gap = float(eps), gap
    return best


def direct_train(pretrained: Model, data: Dataset, hp: HyperParams, on_epoch=None) -> Model:
    """Adam on ``loss + lam * group_penalty`` for ``T * primal_epochs`` epochs."""
    model = pretrained.copy()
    model.mask = None
    return train_model(
        model, data, hp.T * hp.primal_epochs, hp.lr, hp.batch_size, hp.seed,
        extra_weight_grad=lambda m: {lid: hp.lam * group_subgradient(w) for lid, w in m.weights.items()},
        on_epoch=on_epoch,
    )


def direct_baseline(
    pretrained: Model,
    data: Dataset,
    hp: HyperParams,
    eval_data: Optional[Dataset] = None,
    match_rate: Optional[float] = None,
    on_epoch=None,
    on_retrain_epoch=None,
) -> tuple[Model, SparsityMask, CompressionReport]:
    """Penalise every group equally during training, then cut, prune and retrain.

    Groups are cut with the same ``epsilon`` rule as the main path, using W for
    both rows and columns.  With ``match_rate`` the cut is chosen to land as
    close as possible to that compression rate instead of ``hp.zero_epsilon``.
    """
    base_acc = _accuracy(pretrained, eval_data)
    trained = direct_train(pretrained, data, hp, on_epoch=on_epoch)
    eps = hp.zero_epsilon if match_rate is None else match_epsilon(trained.weights, match_rate)
    mask = mask_from_groups(trained.weights, trained.weights, eps)
    pruned, report = finish(trained, mask, data, hp, eval_data, "direct", base_acc, on_retrain_epoch)
    return pruned, mask, report
