"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .checkpoint import CheckpointError
from .harness import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("deltatune")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deltatune", description="Change-penalized tuning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment JSON file")
        sp.add_argument("--output-dir", help="override the config's output_dir")
        sp.add_argument("--seed", type=int, help="run a single model seed")
        sp.add_argument("--workers", type=int, help="parallel worker processes")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("pretrain", help="train and checkpoint the base models"))
    t = common(sub.add_parser("tune", help="one tuning run against a checkpoint"))
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--method-index", type=int, default=0, help="index into the config's expanded method list")
    t.add_argument("--b", type=int, default=1)
    t.add_argument("--batch-index", type=int, default=0)
    common(sub.add_parser("sweep", help="run the full grid and write results.csv"))
    r = common(sub.add_parser("report", help="aggregate result CSVs"), config_required=False)
    r.add_argument("results", nargs="+", help="results CSV files")
    common(sub.add_parser("gen-data", help="export the configured dataset as an image folder"))
    return p


def _config(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config).with_overrides(args.output_dir, args.seed, args.workers)


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            if args.config:
                out = _config(args).output_dir
            else:
                out = args.output_dir or str(Path(args.results[0]).parent)
            for role, path in harness.cmd_report(args.results, out).items():
                print(f"{role}: {path}")
            return EXIT_OK
        config = _config(args)
        if args.command == "pretrain":
            for row in harness.cmd_pretrain(config):
                print(json.dumps(row))
        elif args.command == "tune":
            print(json.dumps(harness.cmd_tune(config, args.checkpoint, args.method_index, args.b, args.batch_index)))
        elif args.command == "sweep":
            print(harness.cmd_sweep(config))
        elif args.command == "gen-data":
            print(harness.cmd_gen_data(config))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, harness.ReportError, OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
