from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

from apps.engine.models import CostReport


TOLERANCE_HEADER = ("tolerance", "accuracy", "mean_nfe", "total_mults")
BATCH_HEADER = ("batch_size", "accuracy_lbn", "accuracy_naive")
STEP_HEADER = ("step", "loss")
EPOCH_HEADER = ("epoch", "val_accuracy", "mean_nfe")
COST_HEADER = ("model", "layer", "kind", "m_or_w", "channels", "length", "params", "mults", "in_ode")
COMPARE_HEADER = ("model", "params", "accuracy", "total_mults")


class ReportingError(RuntimeError):
    pass


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])
    return target


def render_prepare_summary(summary: dict) -> str:
    sizes = summary["split_sizes"]
    lines = [
        f"dataset: {summary['root']}",
        f"background noise files: {summary['noise_files']}",
        "",
        "split sizes: " + ", ".join(f"{name}={count}" for name, count in sizes.items()),
        "",
        f"{'label':<12}" + "".join(f"{name:>12}" for name in sizes),
    ]
    labels = next(iter(summary["histogram"].values())).keys()
    for label in labels:
        counts = "".join(f"{summary['histogram'][split][label]:>12}" for split in sizes)
        lines.append(f"{label:<12}{counts}")
    return "\n".join(lines)


def render_cost_report(report: CostReport, nfe: float) -> str:
    lines = [
        f"model: {report.variant}",
        "",
        f"{'layer':<16}{'m':>4}{'c':>6}{'l':>6}{'# param':>10}{'# mult':>12}",
    ]
    for row in report.rows:
        mults = f"{row.mults:,}" + (" x NFE" if row.in_ode else "")
        lines.append(f"{row.name:<16}{row.m_or_w:>4}{row.channels:>6}{row.length:>6}{row.params:>10,}{mults:>12}")
    lines.extend(
        [
            "",
            f"total params: {report.total_params:,} ({_kilo(report.total_params)})",
            f"mults: {report.mults_fixed:,} + {report.mults_per_eval:,} x NFE"
            f" ({_kilo(report.mults_fixed)} + {_kilo(report.mults_per_eval)} x NFE)",
            f"total mults at NFE={_number(nfe)}: {report.total_mults(nfe):,}",
        ]
    )
    return "\n".join(lines)


def render_cost_table(reports: Sequence[CostReport]) -> str:
    lines = [f"{'model':<12}{'# param':>10}{'fixed mults':>14}{'mults / eval':>14}"]
    for report in reports:
        lines.append(
            f"{report.variant:<12}{_kilo(report.total_params):>10}"
            f"{report.mults_fixed:>14,}{report.mults_per_eval:>14,}"
        )
    return "\n".join(lines)


def cost_rows(report: CostReport) -> list[tuple]:
    return [
        (report.variant, row.name, row.kind, row.m_or_w, row.channels, row.length, row.params, row.mults, int(row.in_ode))
        for row in report.rows
    ]


def render_eval_report(result: dict) -> str:
    return "\n".join(
        [
            f"model: {result['variant']}",
            f"split: {result['split']} ({result['samples']} samples)",
            f"normalization: {result['bn_mode']}, tolerance {_number(result['tolerance'])}, batch size {result['batch_size']}",
            f"accuracy: {100 * result['accuracy']:.2f}%",
            f"params: {result['total_params']:,}",
            f"mean NFE: {result['mean_nfe']:.2f}",
            f"total mults: {result['total_mults']:,}",
        ]
    )


def render_sweep_report(axis: str, rows: Sequence[dict]) -> str:
    if not rows:
        raise ReportingError("sweep produced no rows")
    if axis == "batch":
        lines = [f"{'batch size':>10}{'L-BN acc':>12}{'naive acc':>12}"]
        for row in rows:
            lines.append(
                f"{row['batch_size']:>10}{100 * row['accuracy_lbn']:>11.2f}%{100 * row['accuracy_naive']:>11.2f}%"
            )
        return "\n".join(lines)

    reference = rows[0]["total_mults"]
    lines = [f"{'tolerance':>10}{'accuracy':>11}{'mean NFE':>10}{'total mults':>14}{'reduction':>11}"]
    for row in rows:
        reduction = 100 * (1 - row["total_mults"] / reference) if reference else 0.0
        lines.append(
            f"{_number(row['tolerance']):>10}{100 * row['accuracy']:>10.2f}%{row['mean_nfe']:>10.2f}"
            f"{row['total_mults']:>14,}{reduction:>10.1f}%"
        )
    return "\n".join(lines)


def render_compare_report(rows: Sequence[dict]) -> str:
    """Accuracy against model size and compute, one line per checkpoint."""
    if not rows:
        raise ReportingError("comparison produced no rows")
    lines = [f"{'model':<12}{'# param':>10}{'accuracy':>11}{'total mults':>14}"]
    for row in rows:
        lines.append(
            f"{row['model']:<12}{_kilo(row['params']):>10}{100 * row['accuracy']:>10.2f}%{row['total_mults']:>14,}"
        )
    return "\n".join(lines)


def _kilo(value: int) -> str:
    return f"{value / 1000:.1f}k" if value >= 1000 else str(value)


def _number(value: float) -> str:
    return f"{value:g}"


def _cell(value: object) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)
