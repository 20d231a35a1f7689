from pathlib import Path

import pytest

from proxprune.harness.config import load_config
from proxprune.harness.commands import cmd_train
from proxprune.harness.datasets import load_dataset
from proxprune.model_engine import Model, train_model

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

_ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def config_for(name: str, out_dir, **overrides):
    cfg = load_config(CONFIGS / f"{name}.cfg")
    return cfg.with_overrides(out_dir=str(out_dir), **overrides).validate()


@pytest.fixture(scope="session")
def planted_baseline(tmp_path_factory):
    """Dense baseline for the planted-sparsity fixture, trained once per session."""
    root = tmp_path_factory.mktemp("planted")
    cfg = config_for("planted", root / "baseline")
    res = cmd_train(cfg)
    return cfg, res.out_dir / "baseline.ckpt", res


@pytest.fixture(scope="session")
def least_squares():
    """Pretrained single linear layer on the planted-zero-column regression data."""
    cfg = load_config(CONFIGS / "least_squares.cfg")
    train, test = load_dataset(cfg.data_spec())
    model = Model(cfg.specs(), cfg.input_dims(), seed=cfg.seed)
    train_model(model, train, cfg.train_epochs, cfg.train_lr, cfg.batch_size, cfg.seed)
    return cfg, model, train, test
