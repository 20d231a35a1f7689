#!/usr/bin/env python3
"""Train, prune, run the direct baseline and tabulate results on the planted fixture.

    python3 scripts/run_planted.py --out runs/planted --seed 0
"""
import argparse
import logging
from pathlib import Path

from proxprune.harness.commands import cmd_baseline_direct, cmd_prune, cmd_report, cmd_train
from proxprune.harness.config import load_config

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "planted.cfg")
    ap.add_argument("--out", default="runs/planted")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config).with_overrides(seed=args.seed)
    out = Path(args.out)
    base = cmd_train(cfg.with_overrides(out_dir=str(out / "baseline")))
    ckpt = base.out_dir / "baseline.ckpt"
    ours = cmd_prune(cfg.with_overrides(out_dir=str(out / "prune")), ckpt)
    cmd_baseline_direct(cfg.with_overrides(out_dir=str(out / "direct")), ckpt,
                        match_rate=ours.report.compression_rate)
    table, _, _ = cmd_report([out / "prune", out / "direct"], out / "report")
    print(table, end="")


if __name__ == "__main__":
    main()
