from __future__ import annotations

import argparse
import logging
import os
import sys

from pydantic import ValidationError

from apps.engine.audio import ConfigError, FormatError
from apps.engine.checkpoint import CheckpointFormatError
from apps.engine.dataset import LayoutError
from apps.engine.models import VARIANTS
from apps.engine.reporting import COST_HEADER, TOLERANCE_HEADER, cost_rows, write_csv
from apps.engine.tools import (
    CompareInput,
    CountInput,
    EvalInput,
    PrepareInput,
    SweepInput,
    TrainInput,
    count,
    eval_checkpoint,
    parse_subset,
    prepare,
    train_model,
)
from apps.runner.main import SweepConfig, run_compare, run_sweep


DATA_DIR_ENV = "KWS_ODE_DATA_DIR"
USAGE_ERRORS = (LayoutError, FormatError, ConfigError, CheckpointFormatError, ValidationError)
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr)

    if getattr(args, "data_dir", "") is None:
        print(f"ERROR: --data-dir is required when {DATA_DIR_ENV} is not set", file=sys.stderr)
        return 2

    try:
        output = args.handler(args)
    except Exception as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return _exit_code(exc)

    print(output)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kws-ode", description="Neural-ODE keyword spotting engine")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity (logs go to stderr)",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    data_dir = os.environ.get(DATA_DIR_ENV)

    prep = commands.add_parser("prepare", help="Index a Speech Commands directory and print split statistics")
    prep.add_argument("--data-dir", default=data_dir, help=f"Dataset root (default: ${DATA_DIR_ENV})")
    prep.add_argument("--subset", default=None, type=_keyword_list, help="Comma-separated keyword subset, e.g. yes,no")
    prep.set_defaults(handler=_cmd_prepare)

    fit = commands.add_parser("train", help="Train a model variant and write a checkpoint")
    fit.add_argument("--model", required=True, choices=VARIANTS)
    fit.add_argument("--data-dir", default=data_dir, help=f"Dataset root (default: ${DATA_DIR_ENV})")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", required=True, help="Checkpoint output path")
    fit.add_argument("--epochs", type=int, default=None, help="Override the number of epochs")
    fit.add_argument("--subset", default=None, type=_keyword_list, help="Comma-separated keyword subset, e.g. yes,no")
    fit.set_defaults(handler=_cmd_train)

    score = commands.add_parser("eval", help="Evaluate a checkpoint on a split")
    score.add_argument("--ckpt", required=True)
    score.add_argument("--data-dir", default=data_dir, help=f"Dataset root (default: ${DATA_DIR_ENV})")
    score.add_argument("--split", default="test", choices=["validation", "test"])
    score.add_argument("--tol", type=float, default=None, help="Solver tolerance (default: the variant's)")
    score.add_argument("--batch-size", type=int, default=1)
    score.add_argument("--bn", default="lbn", choices=["lbn", "naive"])
    score.add_argument("--subset", default=None, type=_keyword_list, help="Keyword subset the checkpoint was trained on")
    score.add_argument("--csv", default=None, help="Optional CSV path for the result row")
    score.set_defaults(handler=_cmd_eval)

    tally = commands.add_parser("count", help="Print parameter and multiply counts")
    tally.add_argument("--model", required=True, choices=VARIANTS + ("all",))
    tally.add_argument("--nfe", type=float, default=0.0, help="Number of function evaluations")
    tally.add_argument("--csv", default=None, help="Optional CSV path for the per-layer table")
    tally.set_defaults(handler=_cmd_count)

    sweep = commands.add_parser("sweep", help="Evaluate a checkpoint across tolerances or batch sizes")
    sweep.add_argument("--ckpt", required=True)
    sweep.add_argument("--data-dir", default=data_dir, help=f"Dataset root (default: ${DATA_DIR_ENV})")
    sweep.add_argument("--axis", required=True, choices=["tolerance", "batch"])
    sweep.add_argument("--values", required=True, type=_float_list, help="Comma-separated sweep points")
    sweep.add_argument("--csv", required=True, help="Output CSV path")
    sweep.add_argument("--split", default="test", choices=["validation", "test"])
    sweep.add_argument("--subset", default=None, type=_keyword_list, help="Keyword subset the checkpoint was trained on")
    sweep.set_defaults(handler=_cmd_sweep)

    versus = commands.add_parser("compare", help="Compare accuracy, parameters and multiplies across checkpoints")
    versus.add_argument("--ckpts", required=True, help="Comma-separated checkpoint paths")
    versus.add_argument("--data-dir", default=data_dir, help=f"Dataset root (default: ${DATA_DIR_ENV})")
    versus.add_argument("--csv", required=True, help="Output CSV path")
    versus.add_argument("--split", default="test", choices=["validation", "test"])
    versus.add_argument("--subset", default=None, type=_keyword_list, help="Keyword subset the checkpoints were trained on")
    versus.set_defaults(handler=_cmd_compare)
    return parser


def _cmd_prepare(args: argparse.Namespace) -> str:
    return prepare(PrepareInput(data_dir=args.data_dir, subset=args.subset)).report


def _cmd_train(args: argparse.Namespace) -> str:
    result = train_model(
        TrainInput(
            model=args.model,
            data_dir=args.data_dir,
            out=args.out,
            seed=args.seed,
            epochs=args.epochs,
            subset=args.subset,
        )
    )
    best = "n/a" if result.best_validation_accuracy is None else f"{100 * result.best_validation_accuracy:.2f}%"
    return "\n".join(
        [
            f"Checkpoint written: {result.checkpoint_path}",
            f"Steps: {result.steps} over {result.epochs} epochs",
            f"Best validation accuracy: {best}",
            f"Metrics: {result.steps_csv}, {result.epochs_csv}",
        ]
    )


def _cmd_eval(args: argparse.Namespace) -> str:
    result = eval_checkpoint(
        EvalInput(
            ckpt=args.ckpt,
            data_dir=args.data_dir,
            split=args.split,
            tolerance=args.tol,
            batch_size=args.batch_size,
            bn=args.bn,
            subset=args.subset,
        )
    )
    if args.csv:
        write_csv(args.csv, TOLERANCE_HEADER, [(result.tolerance, result.accuracy, result.mean_nfe, result.total_mults)])
    return result.report


def _cmd_count(args: argparse.Namespace) -> str:
    result = count(CountInput(model=args.model, nfe=args.nfe))
    if args.csv:
        write_csv(args.csv, COST_HEADER, [row for report in result.reports for row in cost_rows(report)])
    return result.report


def _cmd_sweep(args: argparse.Namespace) -> str:
    result = run_sweep(
        SweepInput(ckpt=args.ckpt, axis=args.axis, values=args.values, csv=args.csv),
        SweepConfig(data_dir=args.data_dir, split=args.split, subset=args.subset),
    )
    return f"{result['report']}\n\nCSV written: {result['csv_path']}"


def _cmd_compare(args: argparse.Namespace) -> str:
    result = run_compare(
        CompareInput(ckpts=args.ckpts, csv=args.csv),
        SweepConfig(data_dir=args.data_dir, split=args.split, subset=args.subset),
    )
    return f"{result['report']}\n\nCSV written: {result['csv_path']}"


def _float_list(raw: str) -> list[float]:
    try:
        values = [float(item) for item in raw.split(",") if item.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("at least one value is required")
    return values


def _keyword_list(raw: str) -> list[str]:
    try:
        return parse_subset(raw)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _exit_code(exc: BaseException) -> int:
    current: BaseException | None = exc
    while current is not None:
        if isinstance(current, USAGE_ERRORS):
            return 2
        current = current.__cause__
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
