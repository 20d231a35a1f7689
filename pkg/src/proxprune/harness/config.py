"""Flat ``key = value`` experiment configuration.

Every key is a field of :class:`ExperimentConfig`; ``#`` starts a comment.
Unknown keys are an error.  Example::

    model = dense:64:32, relu, dense:32:4, softmax-xent-loss
    input_shape = 64
    data_generator = planted
    lam = 0.03
    rho = 0.1
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..model_engine import infer_shapes, parse_architecture
from ..primal_proximal import HyperParams
from .datasets import GENERATORS, DataSpec, parse_shape


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str = "dense:64:32,relu,dense:32:4,softmax-xent-loss"
    input_shape: str = "64"
    seed: int = 0
    out_dir: str = "runs/default"

    data_generator: str = "planted"
    data_n_features: int = 64
    data_n_informative: int = 8
    data_n_classes: int = 4
    data_n_train: int = 2000
    data_n_test: int = 1000
    data_noise: float = 0.0
    data_hidden: int = 16
    data_n_outputs: int = 4
    data_shape: str = ""
    data_path_train: str = ""
    data_path_test: str = ""

    train_epochs: int = 60
    train_lr: float = 1e-3

    lam: float = 1e-7
    rho: float = 1e-3
    T: int = 300
    primal_epochs: int = 1
    lr: float = 1e-4
    zero_epsilon: float = 0.0
    retrain_epochs: int = 300
    batch_size: int = 64
    reset_adam: bool = False
    match_rate: float = 0.0

    # fields that only locate outputs, excluded from hashes
    _UNHASHED = ("out_dir",)
    # fields that determine the dense baseline model
    _BASE_PREFIXES = ("model", "input_shape", "seed", "data_", "train_", "batch_size")

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            lam=self.lam, rho=self.rho, T=self.T, primal_epochs=self.primal_epochs, lr=self.lr,
            zero_epsilon=self.zero_epsilon, retrain_epochs=self.retrain_epochs,
            batch_size=self.batch_size, reset_adam=self.reset_adam, seed=self.seed,
        )

    def data_spec(self) -> DataSpec:
        return DataSpec(
            generator=self.data_generator, n_features=self.data_n_features,
            n_informative=self.data_n_informative, n_classes=self.data_n_classes,
            n_train=self.data_n_train, n_test=self.data_n_test, noise=self.data_noise,
            hidden=self.data_hidden, n_outputs=self.data_n_outputs, shape=self.data_shape,
            path_train=self.data_path_train, path_test=self.data_path_test, seed=self.seed,
        )

    def specs(self):
        return parse_architecture(self.model)

    def input_dims(self) -> tuple[int, ...]:
        return parse_shape(self.input_shape)

    def validate(self) -> "ExperimentConfig":
        try:
            self.hyperparams()
            infer_shapes(self.specs(), self.input_dims())
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.data_generator not in GENERATORS:
            raise ConfigError(f"unknown data_generator {self.data_generator!r}; choose from {GENERATORS}")
        if self.train_epochs < 0 or self.train_lr <= 0 or self.match_rate < 0:
            raise ConfigError("train_epochs >= 0, train_lr > 0 and match_rate >= 0 required")
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def _hash(self, keep) -> str:
        body = "".join(
            f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self) if keep(f.name)
        )
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def config_hash(self) -> str:
        return self._hash(lambda k: k not in self._UNHASHED)

    def base_hash(self) -> str:
        return self._hash(lambda k: k.startswith(self._BASE_PREFIXES))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(name: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",),
        delimiters=("=",), strict=False,
    )
    parser.optionxform = str
    try:
        parser.read_string("[experiment]\n" + text)
    except configparser.Error as err:
        raise ConfigError(str(err)) from err
    if parser.sections() != ["experiment"]:
        raise ConfigError("config files are flat key = value lists without [sections]")
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    builtin = {"int": int, "float": float, "bool": bool, "str": str}
    values = {}
    for key, raw in parser["experiment"].items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, raw, builtin[types[key]])
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
