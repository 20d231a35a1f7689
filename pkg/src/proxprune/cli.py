"""Command line entry point (``proxprune``).

Exit codes: 0 success, 1 usage/config error, 2 numeric failure (divergence or
empty layer), 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from .errors import DivergenceError, EmptyLayerError
from .harness.checkpoint import CheckpointError
from .harness.commands import (
    cmd_baseline_direct,
    cmd_gradient_check,
    cmd_prune,
    cmd_report,
    cmd_train,
)
from .harness.config import ConfigError, ExperimentConfig, load_config
from .harness.datasets import DatasetFormatError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--out", help="run directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="proxprune", description="Joint row/column structured pruning experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train the dense baseline")
    for name, helptext in (("prune", "primal-proximal prune + retrain"),
                           ("baseline-direct", "direct group-lasso prune + retrain")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--baseline", type=Path,
                        help="baseline checkpoint (default: <out>/../baseline/baseline.ckpt)")
        if name == "baseline-direct":
            sp.add_argument("--match-rate", type=float, help="target compression rate")
            sp.add_argument("--match-report", type=Path,
                            help="match the compression rate of this report.json")
    rp = sub.add_parser("report", parents=[common], help="tabulate finished runs")
    rp.add_argument("runs", nargs="+", type=Path)
    gp = sub.add_parser("gradient-check", parents=[common], help="finite-difference check")
    gp.add_argument("--tolerance", type=float, default=1e-4)
    gp.add_argument("--probes", type=int, default=20)
    gp.add_argument("--samples", type=int, default=16)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(out_dir=args.out, seed=args.seed).validate()


def _baseline_path(args, cfg: ExperimentConfig) -> Path:
    if args.baseline:
        return args.baseline
    return Path(cfg.out_dir).parent / "baseline" / "baseline.ckpt"


def _threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def _dispatch(args) -> int:
    if args.command == "report":
        text, _, problems = cmd_report(args.runs, args.out)
        sys.stdout.write(text)
        for msg in problems:
            print(msg, file=sys.stderr)
        return EXIT_IO if len(problems) == len(args.runs) else EXIT_OK
    cfg = _config(args)
    if args.command == "train":
        res = cmd_train(cfg)
    elif args.command == "prune":
        res = cmd_prune(cfg, _baseline_path(args, cfg))
    elif args.command == "baseline-direct":
        rate = args.match_rate
        if args.match_report:
            rate = json.loads(args.match_report.read_text())["compression_rate"]
        res = cmd_baseline_direct(cfg, _baseline_path(args, cfg), match_rate=rate)
    else:
        rep = cmd_gradient_check(cfg, args.samples, args.tolerance, args.probes)
        print(json.dumps({"max_rel_error": rep.max_rel_error, "per_layer": rep.per_layer,
                          "n_probes": rep.n_probes, "passed": rep.passed}, indent=2))
        return EXIT_OK if rep.passed else EXIT_NUMERIC
    print(json.dumps(res.summary, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.threads):
            return _dispatch(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except EmptyLayerError as err:
        print(f"empty layer {err.layer_id}: lam/rho too aggressive ({err})", file=sys.stderr)
        return EXIT_NUMERIC
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, DatasetFormatError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
