"""Command line entry point: ``mmfusion run --config exp.toml``."""
from __future__ import annotations

import argparse
import os
import sys

from .experiment import TASKS, run_experiment


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mmfusion")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train and evaluate one experiment")
    run.add_argument("--config", required=True, help="TOML experiment config")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--out", dest="out_dir", help="override the output directory")
    run.add_argument("--task", choices=TASKS, help="override the task")
    args = parser.parse_args(argv)
    out_dir = os.path.abspath(args.out_dir) if args.out_dir else None
    overrides = {"seed": args.seed, "out_dir": out_dir, "task": args.task}
    return run_experiment(args.config, overrides)


if __name__ == "__main__":
    sys.exit(main())
