#!/usr/bin/env python3
"""Sweep the group penalty weight on one trained baseline and print rate vs accuracy."""
import argparse
from pathlib import Path

from proxprune.harness.commands import cmd_prune, cmd_report, cmd_train
from proxprune.harness.config import load_config

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=ROOT / "configs" / "planted.cfg")
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--lams", default="3e-3,1e-2,3e-2,1e-1")
    ap.add_argument("--T", type=int, default=None, help="override the iteration count")
    args = ap.parse_args()

    cfg = load_config(args.config).with_overrides(T=args.T)
    out = Path(args.out)
    base = cmd_train(cfg.with_overrides(out_dir=str(out / "baseline")))
    runs = []
    for lam in (float(v) for v in args.lams.split(",")):
        d = out / f"lam_{lam:g}"
        cmd_prune(cfg.with_overrides(lam=lam, out_dir=str(d)), base.out_dir / "baseline.ckpt")
        runs.append(d)
    table, _, _ = cmd_report(runs, out / "report")
    print(table, end="")


if __name__ == "__main__":
    main()
