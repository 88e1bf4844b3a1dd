#!/usr/bin/env python3
"""
SoLA Desk - command-line experiment driver.

    python app.py run --out runs/demo
    python app.py rollback --random 10 --out runs/demo
    python app.py eval --out runs/demo
    python app.py drift --radius-grid 1e-9,0.05,0.3 --out runs/demo
    python app.py ablate-rank --ranks 1,2,4 --out runs/demo

Exit codes: 0 success, 1 failed check or SoLA error, 2 usage error.
"""

import argparse
import logging
import sys
from typing import List, Optional

from src.config import resolve_config
from src.errors import SolaError
from src.pipeline import (RunPaths, cmd_ablate_layers, cmd_ablate_rank, cmd_drift, cmd_dump_keys,
                          cmd_edit, cmd_eval, cmd_gen, cmd_rollback, cmd_run, cmd_train_base)
from src.utils import setup_logging

logger = logging.getLogger("sola")


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _str_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--seed", type=int, help="Root seed (overrides the config file)")
    common.add_argument("--out", help="Run directory (SOLA_OUT overrides this)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="Log to run.log only")

    parser = argparse.ArgumentParser(prog="sola", description="Reversible lifelong model editing at desk scale")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen", parents=[common], help="Generate the synthetic benchmark")
    commands.add_parser("train-base", parents=[common], help="Train the frozen base model")
    commands.add_parser("edit", parents=[common], help="Apply the edit stream")
    commands.add_parser("eval", parents=[common], help="Compute metrics and check exact properties")
    rollback = commands.add_parser("rollback", parents=[common], help="Delete the keys of some edits")
    picks = rollback.add_mutually_exclusive_group()
    picks.add_argument("--edit-ids", type=_int_list, help="e.g. 3,5,8")
    picks.add_argument("--random", type=int, help="Roll back N seeded-random applied edits")
    drift = commands.add_parser("drift", parents=[common], help="Cluster-drift baseline sweep")
    drift.add_argument("--radius-grid", type=_float_list)
    layers = commands.add_parser("ablate-layers", parents=[common], help="Edited-layer window sweep")
    layers.add_argument("--layers", type=_str_list, help="e.g. 0-1,1-2,2-3")
    ranks = commands.add_parser("ablate-rank", parents=[common], help="LoRA rank sweep")
    ranks.add_argument("--ranks", type=_int_list, help="e.g. 1,2,3,4,5,10")
    commands.add_parser("dump-keys", parents=[common], help="Write keys.csv")
    commands.add_parser("run", parents=[common], help="gen -> train-base -> edit -> eval")
    return parser


def dispatch(args: argparse.Namespace, config) -> int:
    command = args.command
    if command == "gen":
        cmd_gen(config)
    elif command == "train-base":
        cmd_train_base(config)
    elif command == "edit":
        cmd_edit(config)
    elif command == "eval":
        return cmd_eval(config)
    elif command == "rollback":
        return cmd_rollback(config, args.edit_ids, args.random)
    elif command == "drift":
        return cmd_drift(config, args.radius_grid)
    elif command == "ablate-layers":
        cmd_ablate_layers(config, args.layers)
    elif command == "ablate-rank":
        cmd_ablate_rank(config, args.ranks)
    elif command == "dump-keys":
        cmd_dump_keys(config)
    elif command == "run":
        return cmd_run(config)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = resolve_config(args.config, args.seed, args.out)
        setup_logging(RunPaths.of(config).log, args.log_level, console=not args.quiet)
        logger.info(f"🚀 sola {args.command} -> {config.out_dir}")
        code = dispatch(args, config)
    except SolaError as e:
        logger.error(f"❌ {e}")
        return 1
    if code == 0:
        logger.info(f"✅ {args.command} finished")
    else:
        logger.error(f"❌ {args.command} failed its checks")
    return code


if __name__ == "__main__":
    sys.exit(main())
