"""A small numpy network engine whose prunable parameters are GEMM matrices.

Dense layers hold an ``out x in`` matrix.  Convolutions are computed through
im2col, so their weight is the ``out_channels x (in_channels*kh*kw)`` matrix
that multiplies the unfolded input: rows are filters, columns are filter-shape
positions.  Only these matrices are pruned; biases are ordinary parameters.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DivergenceError, ShapeMismatchError
from .tensor_core import WeightCollection

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "softmax-xent-loss", "mse-loss")
LOSS_KINDS = ("softmax-xent-loss", "mse-loss")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    stride: int = 1
    padding: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def prunable(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def weight_shape(self) -> tuple[int, int]:
        if self.kind == "dense":
            return (self.out_features, self.in_features)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels * self.kernel_h * self.kernel_w)
        raise ValueError(f"{self.kind} has no weight matrix")

    def __str__(self) -> str:
        suffix = "" if self.bias else ":nobias"
        if self.kind == "dense":
            return f"dense:{self.in_features}:{self.out_features}{suffix}"
        if self.kind == "conv2d":
            return (
                f"conv2d:{self.in_channels}:{self.out_channels}:{self.kernel_h}:"
                f"{self.kernel_w}:{self.stride}:{self.padding}{suffix}"
            )
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        """Parse ``dense:IN:OUT``, ``conv2d:CIN:COUT:KH:KW:STRIDE:PAD``, ``relu`` ...

        A trailing ``:nobias`` drops the bias vector of a dense/conv layer.
        """
        parts = [p.strip() for p in text.strip().split(":")]
        bias = True
        if parts[-1] == "nobias":
            bias = False
            parts = parts[:-1]
        kind, args = parts[0], [int(p) for p in parts[1:]]
        if kind == "dense":
            if len(args) != 2:
                raise ValueError(f"dense needs IN:OUT, got {text!r}")
            return cls(kind, in_features=args[0], out_features=args[1], bias=bias)
        if kind == "conv2d":
            if len(args) not in (4, 5, 6):
                raise ValueError(f"conv2d needs CIN:COUT:KH:KW[:STRIDE[:PAD]], got {text!r}")
            stride = args[4] if len(args) > 4 else 1
            pad = args[5] if len(args) > 5 else 0
            return cls(kind, in_channels=args[0], out_channels=args[1], kernel_h=args[2],
                       kernel_w=args[3], stride=stride, padding=pad, bias=bias)
        if args:
            raise ValueError(f"{kind} takes no arguments, got {text!r}")
        return cls(kind)


def parse_architecture(text: str) -> list[LayerSpec]:
    return [LayerSpec.parse(t) for t in text.split(",") if t.strip()]


def format_architecture(specs) -> str:
    return ",".join(str(s) for s in specs)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def infer_shapes(specs, input_shape) -> list[tuple[int, ...]]:
    """Per-sample shape after every layer; raises if consecutive layers do not compose."""
    shape = tuple(int(s) for s in input_shape)
    out = []
    for k, s in enumerate(specs):
        if s.kind in LOSS_KINDS and k != len(specs) - 1:
            raise ShapeMismatchError("the loss must be the last layer")
        if s.kind == "dense":
            if shape != (s.in_features,):
                raise ShapeMismatchError(f"layer {k} ({s}) expects ({s.in_features},), got {shape}")
            shape = (s.out_features,)
        elif s.kind == "conv2d":
            if len(shape) != 3 or shape[0] != s.in_channels:
                raise ShapeMismatchError(f"layer {k} ({s}) expects ({s.in_channels}, H, W), got {shape}")
            oh = _conv_out(shape[1], s.kernel_h, s.stride, s.padding)
            ow = _conv_out(shape[2], s.kernel_w, s.stride, s.padding)
            if oh <= 0 or ow <= 0:
                raise ShapeMismatchError(f"layer {k} ({s}) produces an empty output from {shape}")
            shape = (s.out_channels, oh, ow)
        elif s.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif s.kind in LOSS_KINDS:
            if len(shape) != 1:
                raise ShapeMismatchError(f"loss expects flat logits, got {shape}")
        out.append(shape)
    if not specs or specs[-1].kind not in LOSS_KINDS:
        raise ShapeMismatchError("the last layer must be a loss")
    return out


# ---------------------------------------------------------------------------
# im2col


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unfold ``(N, C, H, W)`` into ``(N*OH*OW, C*kh*kw)``; column order is (c, i, j)."""
    n, c, h, w = x.shape
    oh = _conv_out(h, kh, stride, pad)
    ow = _conv_out(w, kw, stride, pad)
    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)]) if pad else x
    col = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            col[:, :, i, j, :, :] = img[:, :, i:i_max:stride, j:j_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, -1)


def col2im(col: np.ndarray, x_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the image."""
    n, c, h, w = x_shape
    oh = _conv_out(h, kh, stride, pad)
    ow = _conv_out(w, kw, stride, pad)
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += col[:, :, i, j, :, :]
    return img[:, :, pad:pad + h, pad:pad + w]


def conv2d_gemm(x, weight, bias, stride=1, pad=0, kh=None, kw=None):
    """Convolution as ``im2col(x) @ weight.T``; returns ``(N, OUT, OH, OW)``."""
    n, c, h, w = x.shape
    out_c = weight.shape[0]
    oh = _conv_out(h, kh, stride, pad)
    ow = _conv_out(w, kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)
    y = cols @ weight.T
    if bias is not None:
        y = y + bias
    return y.reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2), cols


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    """Inputs and targets; classification targets are integer class indices."""

    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if len(self.inputs) != len(self.labels):
            raise ShapeMismatchError(
                f"{len(self.inputs)} inputs but {len(self.labels)} labels"
            )
        if self.n_classes and self.labels.ndim == 1 and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ValueError("labels outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.split, self.n_classes, self.meta)


# ---------------------------------------------------------------------------
# model


@dataclass
class Gradients:
    weights: WeightCollection
    biases: dict[str, np.ndarray]


class Model:
    """Sequential network: ``specs`` applied to per-sample ``input_shape``.

    ``weights`` holds one matrix per dense/conv layer, keyed by ids such as
    ``conv0``, ``conv1``, ``dense0`` in layer order.  ``mask`` is set by the
    pruning pipeline and is ``None`` for a dense model.
    """

    def __init__(self, specs, input_shape, seed: int = 0, weights=None, biases=None):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.parse(s) for s in specs]
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = infer_shapes(self.specs, self.input_shape)
        self.layer_ids: list[Optional[str]] = []
        counts: dict[str, int] = {}
        for s in self.specs:
            if s.prunable:
                short = "dense" if s.kind == "dense" else "conv"
                self.layer_ids.append(f"{short}{counts.get(short, 0)}")
                counts[short] = counts.get(short, 0) + 1
            else:
                self.layer_ids.append(None)
        self.mask = None
        if weights is None:
            weights, biases = self._init_params(seed)
        self.weights = weights if isinstance(weights, WeightCollection) else WeightCollection(weights)
        self.biases = {k: np.asarray(v, dtype=np.float64) for k, v in (biases or {}).items()}
        expected = {lid: s.weight_shape() for lid, s in self.prunable_layers()}
        if self.weights.shapes() != expected:
            raise ShapeMismatchError(f"weights {self.weights.shapes()} do not match specs {expected}")

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        weights, biases = [], {}
        for lid, s in self.prunable_layers():
            rows, cols = s.weight_shape()
            bound = np.sqrt(6.0 / cols)
            weights.append((lid, rng.uniform(-bound, bound, size=(rows, cols))))
            if s.bias:
                biases[lid] = np.zeros(rows)
        return WeightCollection(weights), biases

    def prunable_layers(self):
        return [(lid, s) for lid, s in zip(self.layer_ids, self.specs) if lid is not None]

    def spec_of(self, layer_id: str) -> LayerSpec:
        return self.specs[self.layer_ids.index(layer_id)]

    @property
    def loss_kind(self) -> str:
        return self.specs[-1].kind

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed ``W:<id>`` / ``b:<id>`` (in-place updates stick)."""
        params = {f"W:{k}": v for k, v in self.weights.items()}
        params.update({f"b:{k}": v for k, v in self.biases.items()})
        return params

    def n_params(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def copy(self) -> "Model":
        return copy.deepcopy(self)


def _loss(kind, logits, targets):
    # non-finite results are reported by the callers as DivergenceError
    with np.errstate(invalid="ignore", over="ignore"):
        return _loss_unchecked(kind, logits, targets)


def _loss_unchecked(kind, logits, targets):
    n = logits.shape[0]
    if kind == "softmax-xent-loss":
        targets = np.asarray(targets)
        if targets.ndim != 1 or targets.dtype.kind not in "iu":
            raise ShapeMismatchError("softmax-xent-loss needs integer class labels")
        k = logits.shape[1]
        if targets.min() < 0 or targets.max() >= k:
            raise ShapeMismatchError(f"labels outside [0, {k})")
        z = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        loss = float(np.mean(logsum - z[np.arange(n), targets]))
        probs = np.exp(z - logsum[:, None])
        probs[np.arange(n), targets] -= 1.0
        return loss, probs / n
    targets = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    diff = logits - targets
    return float(0.5 * np.sum(diff * diff) / n), diff / n


def _as_batch(batch):
    if isinstance(batch, Dataset):
        return batch.inputs, batch.labels
    inputs, targets = batch
    return np.asarray(inputs, dtype=np.float64), targets


def _run(model: Model, x: np.ndarray, cache: bool):
    if x.shape[1:] != model.input_shape:
        raise ShapeMismatchError(f"batch sample shape {x.shape[1:]} != model input {model.input_shape}")
    tape = []
    for lid, s in zip(model.layer_ids, model.specs):
        if s.kind in LOSS_KINDS:
            break
        if s.kind == "dense":
            b = model.biases.get(lid)
            inp = x
            x = x @ model.weights[lid].T
            if b is not None:
                x = x + b
            tape.append(inp if cache else None)
        elif s.kind == "conv2d":
            shape = x.shape
            x, cols = conv2d_gemm(x, model.weights[lid], model.biases.get(lid), s.stride,
                                  s.padding, s.kernel_h, s.kernel_w)
            tape.append((cols, shape) if cache else None)
        elif s.kind == "relu":
            tape.append(x > 0 if cache else None)
            x = np.maximum(x, 0.0)
        elif s.kind == "flatten":
            tape.append(x.shape if cache else None)
            x = x.reshape(x.shape[0], -1)
    return x, tape


def predict(model: Model, inputs) -> np.ndarray:
    """Logits (pre-loss outputs) for a batch of inputs."""
    return _run(model, np.asarray(inputs, dtype=np.float64), cache=False)[0]


def forward(model: Model, batch) -> tuple[float, np.ndarray]:
    """Mean batch loss and logits.

    Raises :class:`DivergenceError` if the loss is not finite.
    """
    x, targets = _as_batch(batch)
    if len(x) == 0:
        raise ValueError("empty batch")
    logits, _ = _run(model, x, cache=False)
    loss, _ = _loss(model.loss_kind, logits, targets)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    return loss, logits


def loss_and_grad(model: Model, batch) -> tuple[float, np.ndarray, Gradients]:
    x, targets = _as_batch(batch)
    if len(x) == 0:
        raise ValueError("empty batch")
    logits, tape = _run(model, x, cache=True)
    loss, d = _loss(model.loss_kind, logits, targets)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    gw, gb = {}, {}
    n_active = len(tape)
    for k in range(n_active - 1, -1, -1):
        s, lid, saved = model.specs[k], model.layer_ids[k], tape[k]
        if s.kind == "dense":
            gw[lid] = d.T @ saved
            if lid in model.biases:
                gb[lid] = d.sum(axis=0)
            if k > 0:
                d = d @ model.weights[lid]
        elif s.kind == "conv2d":
            cols, x_shape = saved
            d2 = d.transpose(0, 2, 3, 1).reshape(-1, s.out_channels)
            gw[lid] = d2.T @ cols
            if lid in model.biases:
                gb[lid] = d2.sum(axis=0)
            if k > 0:
                d = col2im(d2 @ model.weights[lid], x_shape, s.kernel_h, s.kernel_w, s.stride, s.padding)
        elif s.kind == "relu":
            d = d * saved
        elif s.kind == "flatten":
            d = d.reshape(saved)
    grads = Gradients(WeightCollection((lid, gw[lid]) for lid in model.weights.ids()), gb)
    return loss, logits, grads


def backward(model: Model, batch) -> Gradients:
    """Exact gradients of the mean batch loss w.r.t. every weight matrix and bias."""
    return loss_and_grad(model, batch)[2]


def evaluate(model: Model, data: Dataset, batch_size: int = 4096) -> dict[str, float]:
    """Mean loss and, for classifiers, accuracy over ``data``."""
    total, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        part = data.subset(slice(start, start + batch_size))
        loss, logits = forward(model, part)
        total += loss * len(part)
        if model.loss_kind == "softmax-xent-loss":
            correct += int(np.sum(np.argmax(logits, axis=1) == part.labels))
    out = {"loss": total / len(data)}
    if model.loss_kind == "softmax-xent-loss":
        out["accuracy"] = correct / len(data)
    return out


# ---------------------------------------------------------------------------
# optimisers


@dataclass
class OptimState:
    """Adam moments keyed by parameter name, plus the step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update, applied in place to ``params``.

    Parameters missing from ``grads`` are left untouched.
    """
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def sgd_step(lr: float, params: dict, grads: dict) -> dict:
    for name, g in grads.items():
        params[name] -= lr * g
    return params


def flat_grads(grads: Gradients) -> dict[str, np.ndarray]:
    out = {f"W:{k}": v for k, v in grads.weights.items()}
    out.update({f"b:{k}": v for k, v in grads.biases.items()})
    return out


def run_epoch(
    model: Model,
    data: Dataset,
    opt: OptimState,
    rng: np.random.Generator,
    batch_size: int,
    extra_weight_grad: Optional[Callable[[Model], dict]] = None,
    grad_filter: Optional[Callable[[dict], None]] = None,
) -> float:
    """One shuffled pass of Adam over ``data``; returns the mean minibatch loss.

    ``extra_weight_grad(model)`` returns ``{layer_id: array}`` terms added to the
    loss gradient of the weight matrices before each step.  ``grad_filter``
    may edit the flat gradient dict in place (used to freeze masked entries).
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    order = rng.permutation(len(data))
    losses = []
    params = model.parameters()
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        loss, _, grads = loss_and_grad(model, data.subset(idx))
        g = flat_grads(grads)
        if extra_weight_grad is not None:
            for lid, term in extra_weight_grad(model).items():
                g[f"W:{lid}"] = g[f"W:{lid}"] + term
        if grad_filter is not None:
            grad_filter(g)
        adam_step(opt, params, g)
        for name, p in params.items():
            if not np.all(np.isfinite(p)):
                raise DivergenceError(f"parameter {name} became non-finite")
        losses.append(loss * len(idx))
    return float(np.sum(losses) / len(data))


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_layer: dict[str, float]
    n_probes: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(
    model: Model,
    batch,
    tolerance: float = 1e-4,
    probes_per_layer: int = 20,
    h: float = 1e-5,
    seed: int = 0,
    grad_fn: Optional[Callable[[Model, object], Gradients]] = None,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients with central differences at random entries.

    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.  ``grad_fn``
    replaces :func:`backward` (used to check that a broken gradient is caught).
    """
    x, _ = _as_batch(batch)
    if len(x) == 0:
        raise ValueError("gradient_check needs a non-empty batch")
    grads = (grad_fn or backward)(model, batch)
    rng = np.random.default_rng(seed)
    analytic = {f"W:{k}": grads.weights[k] for k in model.weights}
    analytic.update({f"b:{k}": v for k, v in grads.biases.items()})
    params = model.parameters()
    per_layer: dict[str, float] = {}
    n = 0
    for name, p in params.items():
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes_per_layer, flat.size), replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = forward(model, batch)[0]
            flat[i] = orig - h
            f_minus = forward(model, batch)[0]
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), abs_floor)
            worst = max(worst, err)
            n += 1
        per_layer[name] = worst
    return GradCheckReport(max(per_layer.values(), default=0.0), per_layer, n, tolerance)


def train_model(
    model: Model,
    data: Dataset,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    extra_weight_grad=None,
    grad_filter=None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> Model:
    """Plain Adam training from fresh optimiser state; mutates and returns ``model``."""
    opt = OptimState(lr=lr)
    rng = np.random.default_rng(seed)
    for epoch in range(1, epochs + 1):
        loss = run_epoch(model, data, opt, rng, batch_size, extra_weight_grad, grad_filter)
        if on_epoch is not None:
            on_epoch(epoch, loss)
    return model
