"""Command-line entry point.

Every verb takes ``--config`` (a JSON experiment config) and an optional
``--out`` experiment directory; the ``OWLSEG_ROOT`` environment variable
overrides the config's output directory when ``--out`` is absent.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .config import load_config
from .core import (
    ConfigError,
    DomainError,
    FormatError,
    GenerationError,
    NumericError,
)
from .experiment import Experiment, ExperimentLock, resolve_root, set_deterministic
from .openset import SCORING_METHODS


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owlseg",
        description="Open-world LIDAR segmentation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="experiment directory override")

    common(sub.add_parser("gen-data", help="materialize the synthetic dataset"))
    common(sub.add_parser("train-closed", help="train the closed-set model"))
    common(sub.add_parser("finetune-oseg", help="add redundancy slots and finetune"))

    p_il = sub.add_parser("il", help="run one incremental stage")
    common(p_il)
    p_il.add_argument("--class", dest="class_id", type=int, required=True,
                      help="novel class ID to introduce")

    p_eval = sub.add_parser("evaluate", help="write an evaluation report")
    common(p_eval)
    p_eval.add_argument("--method", choices=SCORING_METHODS, default=None,
                        help="unknown scoring method (default: real when available)")
    p_eval.add_argument("--stage", choices=("closed", "open", "il"), default=None,
                        help="which checkpoint to evaluate (default: latest)")
    p_eval.add_argument("--split", choices=("train", "val"), default="val")

    p_dump = sub.add_parser("dump-scores", help="write per-point score records")
    common(p_dump)
    p_dump.add_argument("--method", choices=SCORING_METHODS, default="real")
    p_dump.add_argument("--format", dest="fmt", choices=("csv", "bin"), default="csv")
    p_dump.add_argument("--stage", choices=("closed", "open", "il"), default=None)
    p_dump.add_argument("--split", choices=("train", "val"), default="val")

    common(sub.add_parser("plot-data", help="collate reports and traces for plotting"))
    return parser


def _dispatch(exp: Experiment, args: argparse.Namespace) -> dict:
    if args.command == "gen-data":
        return exp.cmd_gen_data()
    if args.command == "train-closed":
        return exp.cmd_train_closed()
    if args.command == "finetune-oseg":
        return exp.cmd_finetune_oseg()
    if args.command == "il":
        return exp.cmd_il(args.class_id)
    if args.command == "evaluate":
        return exp.cmd_evaluate(method=args.method, stage=args.stage, split=args.split)
    if args.command == "dump-scores":
        return exp.cmd_dump_scores(
            method=args.method, fmt=args.fmt, stage=args.stage, split=args.split
        )
    if args.command == "plot-data":
        return exp.cmd_plot_data()
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    set_deterministic()
    try:
        cfg = load_config(args.config)
        root = resolve_root(cfg, args.out)
        with ExperimentLock(root):
            exp = Experiment(cfg, root)
            doc = _dispatch(exp, args)
    except (ConfigError, DomainError, FormatError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    print(f"{doc['command']}: ok")
    for rel in sorted(doc.get("outputs", {})):
        print(f"  {rel}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
