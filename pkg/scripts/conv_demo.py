#!/usr/bin/env python3
"""Prune the small CNN fixture and show how many filters and filter positions survive.

Also checks that the physically compacted network gives the same outputs as the
masked one.
"""
import argparse
from pathlib import Path

import numpy as np

from proxprune.harness.commands import cmd_prune, cmd_train
from proxprune.harness.config import load_config
from proxprune.harness.datasets import load_dataset
from proxprune.model_engine import predict
from proxprune.pruning_pipeline import compact_predict

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/conv")
    args = ap.parse_args()

    cfg = load_config(ROOT / "configs" / "conv.cfg")
    out = Path(args.out)
    base = cmd_train(cfg.with_overrides(out_dir=str(out / "baseline")))
    res = cmd_prune(cfg.with_overrides(out_dir=str(out / "prune")), base.out_dir / "baseline.ckpt")
    mask = res.model.mask
    for layer in res.report.layers:
        rows, cols = mask.row_keep[layer.layer_id], mask.col_keep[layer.layer_id]
        print(f"{layer.layer_id}: rows {rows.sum()}/{rows.size}, cols {cols.sum()}/{cols.size}, "
              f"{layer.remaining}/{layer.total} weights")
    print(f"compression {res.report.compression_rate:.2f}x, accuracy "
          f"{res.report.base_accuracy:.3f} -> {res.report.pruned_accuracy:.3f}")

    _, test = load_dataset(cfg.data_spec())
    gap = np.abs(compact_predict(res.model, mask, test.inputs) - predict(res.model, test.inputs)).max()
    print(f"compact vs masked forward: max abs difference {gap:.2e}")


if __name__ == "__main__":
    main()
