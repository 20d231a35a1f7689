"""train / prune / baseline-direct / report / gradient-check as library calls.

Each command owns one run directory.  Files written:

``train``            baseline.ckpt, train_metrics.jsonl, config.cfg, summary.json
``prune``            pruned.ckpt, iterations.jsonl, retrain_metrics.jsonl,
                     report.json, config.cfg, summary.json
``baseline-direct``  pruned.ckpt, direct_metrics.jsonl, retrain_metrics.jsonl,
                     report.json, config.cfg, summary.json
``report``           report_table.csv, layer_series.json

Metrics files are JSON lines, one record per epoch or iteration:

* train: ``epoch, train_loss, train_accuracy, test_accuracy, config_hash``
* direct: ``epoch, train_loss, config_hash``
* iterations: ``t, train_loss, consensus_x, consensus_y, zero_rows, zero_cols,
  penalty, config_hash``
* retrain: ``epoch, train_loss, test_accuracy, config_hash``
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..model_engine import Dataset, Model, evaluate, gradient_check, train_model
from ..primal_proximal import run
from ..pruning_pipeline import CompressionReport, direct_baseline, extract_mask, finish
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .datasets import load_dataset

log = logging.getLogger(__name__)


class MetricsWriter:
    """Append-only JSON-lines sink; each record is flushed as written."""

    def __init__(self, path, config_hash: str):
        self.path = Path(path)
        self.config_hash = config_hash
        self._f = open(self.path, "w")
        self.rows = 0

    def write(self, record: dict) -> None:
        record = {**record, "config_hash": self.config_hash}
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()
        self.rows += 1

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _prepare(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(config.to_text())
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _accuracy(model: Model, data: Dataset) -> Optional[float]:
    return evaluate(model, data).get("accuracy")


@dataclass
class RunResult:
    out_dir: Path
    model: Model
    summary: dict
    report: Optional[CompressionReport] = None
    extra: dict = field(default_factory=dict)


def cmd_train(config: ExperimentConfig) -> RunResult:
    """Train the dense baseline from scratch."""
    out = _prepare(config)
    train, test = load_dataset(config.data_spec())
    model = Model(config.specs(), config.input_dims(), seed=config.seed)
    h = config.config_hash()
    with MetricsWriter(out / "train_metrics.jsonl", h) as mw:
        def on_epoch(epoch, loss):
            rec = {"epoch": epoch, "train_loss": loss,
                   "train_accuracy": _accuracy(model, train),
                   "test_accuracy": _accuracy(model, test)}
            mw.write(rec)
            log.info("train epoch %d loss %.5f", epoch, loss)

        train_model(model, train, config.train_epochs, config.train_lr, config.batch_size,
                    config.seed, on_epoch=on_epoch)
    meta = {"stage": "baseline", "seed": config.seed, "epoch": config.train_epochs,
            "config_hash": h, "base_hash": config.base_hash()}
    save_checkpoint(out / "baseline.ckpt", model, meta)
    summary = {"command": "train", "config_hash": h, "base_hash": config.base_hash(),
               "train": evaluate(model, train), "test": evaluate(model, test),
               "epochs": config.train_epochs}
    _write_json(out / "summary.json", summary)
    return RunResult(out, model, summary)


def _load_baseline(config: ExperimentConfig, baseline_path) -> tuple[Model, dict]:
    model, meta = load_checkpoint(baseline_path)
    if meta.get("base_hash") != config.base_hash():
        raise ConfigError(
            f"baseline {baseline_path} was trained with a different model/data/training "
            f"config (base_hash {meta.get('base_hash')} != {config.base_hash()})"
        )
    return model, meta


def _retrain_logger(mw: MetricsWriter, test: Dataset):
    def on_epoch(epoch, loss, model):
        mw.write({"epoch": epoch, "train_loss": loss, "test_accuracy": _accuracy(model, test)})
    return on_epoch


def _finish_run(out: Path, command: str, config: ExperimentConfig, pruned: Model,
                report: CompressionReport, epoch: int) -> RunResult:
    h = config.config_hash()
    meta = {"stage": command, "seed": config.seed, "epoch": epoch,
            "config_hash": h, "base_hash": config.base_hash()}
    save_checkpoint(out / "pruned.ckpt", pruned, meta)
    report_dict = {**report.to_dict(), "config_hash": h}
    _write_json(out / "report.json", report_dict)
    summary = {"command": command, "config_hash": h, "compression_rate": report.compression_rate,
               "base_accuracy": report.base_accuracy, "pruned_accuracy": report.pruned_accuracy,
               "epochs_used": report.epochs_used}
    _write_json(out / "summary.json", summary)
    return RunResult(out, pruned, summary, report)


def cmd_prune(config: ExperimentConfig, baseline_path) -> RunResult:
    """Primal-proximal pruning, mask extraction, retraining and accounting."""
    out = _prepare(config)
    hp = config.hyperparams()
    train, test = load_dataset(config.data_spec())
    base, _ = _load_baseline(config, baseline_path)
    base_acc = _accuracy(base, test)
    h = config.config_hash()
    with MetricsWriter(out / "iterations.jsonl", h) as mw:
        def observe(metrics, state):
            mw.write(metrics.to_dict())
            log.info("iter %d loss %.5f cx %.2e cy %.2e", metrics.t, metrics.train_loss,
                     metrics.consensus_x, metrics.consensus_y)
        state, history = run(base, train, hp, observer=observe)
    mask = extract_mask(state, hp.zero_epsilon)
    with MetricsWriter(out / "retrain_metrics.jsonl", h) as mw:
        pruned, report = finish(state.w, mask, train, hp, test, "primal-proximal", base_acc,
                                _retrain_logger(mw, test))
    res = _finish_run(out, "prune", config, pruned, report, report.epochs_used)
    res.extra["history"] = history
    res.extra["state"] = state
    return res


def cmd_baseline_direct(config: ExperimentConfig, baseline_path,
                        match_rate: Optional[float] = None) -> RunResult:
    """Equal-penalty group-lasso training followed by the same prune/retrain path."""
    out = _prepare(config)
    hp = config.hyperparams()
    train, test = load_dataset(config.data_spec())
    base, _ = _load_baseline(config, baseline_path)
    h = config.config_hash()
    rate = match_rate if match_rate is not None else (config.match_rate or None)
    with MetricsWriter(out / "direct_metrics.jsonl", h) as dw, \
            MetricsWriter(out / "retrain_metrics.jsonl", h) as rw:
        def on_epoch(epoch, loss):
            dw.write({"epoch": epoch, "train_loss": loss})
        pruned, mask, report = direct_baseline(base, train, hp, test, match_rate=rate,
                                               on_epoch=on_epoch,
                                               on_retrain_epoch=_retrain_logger(rw, test))
    return _finish_run(out, "baseline-direct", config, pruned, report, report.epochs_used)


TABLE_FIELDS = ("run", "method", "status", "base_accuracy", "pruned_accuracy",
                "compression_rate", "epochs_used")


def cmd_report(run_dirs, out_dir=None) -> tuple[str, dict, list[str]]:
    """Collect ``report.json`` files into a CSV table and per-layer series.

    Returns ``(csv_text, series, problems)``; a run without a readable report
    yields a row with ``status`` set to the problem and no numbers.
    """
    rows, series, problems = [], {}, []
    for d in run_dirs:
        d = Path(d)
        name = str(d)
        try:
            report = json.loads((d / "report.json").read_text())
            rep = CompressionReport.from_dict({k: v for k, v in report.items() if k != "config_hash"})
        except FileNotFoundError:
            problems.append(f"{name}: missing report.json")
            rows.append({"run": name, "status": "missing"})
            continue
        except (ValueError, KeyError, TypeError) as err:
            problems.append(f"{name}: unreadable report.json ({err})")
            rows.append({"run": name, "status": "partial"})
            continue
        rows.append({"run": name, "method": rep.method, "status": "ok",
                     "base_accuracy": rep.base_accuracy, "pruned_accuracy": rep.pruned_accuracy,
                     "compression_rate": rep.compression_rate, "epochs_used": rep.epochs_used})
        series[name] = {l.layer_id: l.remaining for l in rep.layers}
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in TABLE_FIELDS})
    text = buf.getvalue()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report_table.csv").write_text(text)
        _write_json(out / "layer_series.json", series)
    return text, series, problems


def cmd_gradient_check(config: ExperimentConfig, n_samples: int = 16, tolerance: float = 1e-4,
                       probes: int = 20):
    train, _ = load_dataset(config.data_spec())
    model = Model(config.specs(), config.input_dims(), seed=config.seed)
    batch = train.subset(slice(0, n_samples))
    return gradient_check(model, batch, tolerance=tolerance, probes_per_layer=probes,
                          seed=config.seed)
