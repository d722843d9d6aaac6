"""Command-line front end: ``python -m modlab <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Subcommands map onto pipeline stages and share one output directory:

    train --phase dense   warm-up training          -> dense.ckpt, train_dense.json
    profile               ARank of the dense model  -> arank.json, arank.csv
    convert               layer plan + MoD wrap     -> plan.json, converted.ckpt
    train --phase mod     joint tuning              -> mod.ckpt, train_mod.json
    eval                  held-out evaluation       -> eval.json, routing_traces.jsonl
    flops                 FLOPs comparison          -> flops.json, flops.csv
    report                summary of the directory  -> summary.txt, summary.json
    run                   all of the above in order

Exit status: 0 on success, 1 when a stage fails, 2 for a bad config or usage.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .errors import ModlabError, SpecError
from .experiment import ExperimentConfig, StageError, report, run_experiment, run_stage, write_config

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2

_STAGE_OF = {"profile": "profile", "convert": "convert", "eval": "eval", "flops": "flops"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override model and training seeds")
    common.add_argument("--out", type=Path, default=Path("modlab_out"), help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="modlab", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("profile", "convert", "eval", "flops", "report", "run"):
        sub.add_parser(name, parents=[common])
    t = sub.add_parser("train", parents=[common])
    t.add_argument("--phase", choices=("dense", "mod"), default="dense")
    return p


def resolve_config(args) -> ExperimentConfig:
    """``--config`` if given, else ``<out>/config.json`` if present, else the preset."""
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config)
    elif (args.out / "config.json").exists():
        cfg = ExperimentConfig.load(args.out / "config.json")
    else:
        cfg = ExperimentConfig.preset()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            text, _ = report(args.out)
            sys.stdout.write(text)
            return EXIT_OK
        cfg = resolve_config(args)
    except SpecError as exc:
        print(f"modlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModlabError as exc:
        print(f"modlab: {exc}", file=sys.stderr)
        return EXIT_STAGE
    try:
        os.makedirs(args.out, exist_ok=True)
        if args.command == "run":
            run_experiment(cfg, args.out)
            sys.stdout.write((args.out / "summary.txt").read_text())
            return EXIT_OK
        write_config(cfg, args.out)
        if args.command == "train":
            run_stage("warmup" if args.phase == "dense" else "tune", cfg, args.out)
        else:
            run_stage(_STAGE_OF[args.command], cfg, args.out)
        print(f"{args.command}: artifacts in {args.out}")
        return EXIT_OK
    except StageError as exc:
        print(f"modlab: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except SpecError as exc:
        print(f"modlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModlabError, OSError) as exc:
        print(f"modlab: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    raise SystemExit(main())
