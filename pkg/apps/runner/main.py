from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

from apps.engine.reporting import (
    BATCH_HEADER,
    COMPARE_HEADER,
    TOLERANCE_HEADER,
    render_compare_report,
    render_sweep_report,
    write_csv,
)
from apps.engine.tools import (
    CompareInput,
    CompareToolError,
    EvalInput,
    EvalToolError,
    SweepInput,
    SweepToolError,
    eval_checkpoint,
    open_session,
)


logger = logging.getLogger(__name__)


@dataclass(slots=True)
class SweepConfig:
    data_dir: str
    split: Literal["validation", "test"] = "test"
    subset: list[str] | None = None


def run_sweep(payload: SweepInput, config: SweepConfig) -> dict:
    """Evaluate one checkpoint along a tolerance or batch-size axis and write the CSV.

    The tolerance axis runs L-BN inference at batch size 1; the batch axis runs
    L-BN and naive batch normalization at every batch size.
    """
    try:
        session = open_session(payload.ckpt, config.data_dir, config.subset)
    except EvalToolError as exc:
        raise SweepToolError(str(exc)) from exc

    def _evaluate(**overrides) -> dict:
        request = EvalInput(ckpt=payload.ckpt, data_dir=config.data_dir, split=config.split, **overrides)
        try:
            return eval_checkpoint(request, session).model_dump()
        except EvalToolError as exc:
            raise SweepToolError(str(exc)) from exc

    rows: list[dict] = []
    if payload.axis == "tolerance":
        for tolerance in payload.values:
            result = _evaluate(tolerance=tolerance, batch_size=1, bn="lbn")
            rows.append(
                {
                    "tolerance": tolerance,
                    "accuracy": result["accuracy"],
                    "mean_nfe": result["mean_nfe"],
                    "total_mults": result["total_mults"],
                }
            )
            logger.info("sweep point tolerance=%g done", tolerance)
        header = TOLERANCE_HEADER
    else:
        for batch_size in payload.batch_sizes():
            lbn = _evaluate(batch_size=batch_size, bn="lbn")
            naive = _evaluate(batch_size=batch_size, bn="naive")
            rows.append(
                {
                    "batch_size": batch_size,
                    "accuracy_lbn": lbn["accuracy"],
                    "accuracy_naive": naive["accuracy"],
                }
            )
            logger.info("sweep point batch_size=%d done", batch_size)
        header = BATCH_HEADER

    csv_path = write_csv(payload.csv, header, [[row[name] for name in header] for row in rows])
    return {
        "variant": session.model.spec.variant,
        "axis": payload.axis,
        "rows": rows,
        "csv_path": str(csv_path),
        "report": render_sweep_report(payload.axis, rows),
    }


def run_compare(payload: CompareInput, config: SweepConfig) -> dict:
    """Accuracy, parameters and total multiplies of several checkpoints, each at its own inference tolerance."""
    rows: list[dict] = []
    for ckpt in payload.ckpts:
        request = EvalInput(ckpt=ckpt, data_dir=config.data_dir, split=config.split, subset=config.subset)
        try:
            result = eval_checkpoint(request)
        except EvalToolError as exc:
            raise CompareToolError(f"{ckpt}: {exc}") from exc
        rows.append(
            {
                "model": result.variant,
                "params": result.total_params,
                "accuracy": result.accuracy,
                "total_mults": result.total_mults,
            }
        )
        logger.info("compared %s (%s)", ckpt, result.variant)

    csv_path = write_csv(payload.csv, COMPARE_HEADER, [[row[name] for name in COMPARE_HEADER] for row in rows])
    return {"rows": rows, "csv_path": str(csv_path), "report": render_compare_report(rows)}
