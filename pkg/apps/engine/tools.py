from __future__ import annotations

import logging
from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator

from apps.engine.audio import AudioIoError, ConfigError, FormatError
from apps.engine.checkpoint import (
    CheckpointFormatError,
    checkpoint_from_model,
    config_digest,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from apps.engine.dataset import KEYWORDS, EmptySplitError, FeatureCache, LayoutError, build_index
from apps.engine.lbn import EmptyDatabase
from apps.engine.models import VARIANTS, CostReport, Variant, cost_report, model_spec
from apps.engine.ode import SolverError
from apps.engine.reporting import (
    EPOCH_HEADER,
    STEP_HEADER,
    render_cost_report,
    render_cost_table,
    render_eval_report,
    render_prepare_summary,
    write_csv,
)
from apps.engine.trainer import BnMode, EvalResult, NonFiniteLoss, evaluate_cached, train, train_config_for


logger = logging.getLogger(__name__)

_DATA_ERRORS = (LayoutError, FormatError, AudioIoError, ConfigError, EmptySplitError)
_MODEL_ERRORS = (CheckpointFormatError, SolverError, EmptyDatabase, FileNotFoundError)


def parse_subset(value: list[str] | str | None) -> list[str] | None:
    if value is None:
        return None
    words = value.split(",") if isinstance(value, str) else value
    cleaned = [word.strip().lower() for word in words if word.strip()]
    if not cleaned:
        raise ValueError("subset must name at least one keyword")
    unknown = [word for word in cleaned if word not in KEYWORDS]
    if unknown:
        raise ValueError(f"not a keyword: {', '.join(unknown)}")
    return cleaned


class _SubsetInput(BaseModel):
    subset: list[str] | None = Field(default=None, description="Optional keyword subset, e.g. \"yes,no\"")

    @field_validator("subset", mode="before")
    @classmethod
    def _validate_subset(cls, value: list[str] | str | None) -> list[str] | None:
        return parse_subset(value)


class PrepareInput(_SubsetInput):
    data_dir: str = Field(..., description="Speech Commands root directory")


class PrepareOutput(BaseModel):
    summary: dict
    report: str


class PrepareToolError(RuntimeError):
    pass


def prepare(payload: PrepareInput) -> PrepareOutput:
    try:
        index = build_index(payload.data_dir, keywords=payload.subset)
    except _DATA_ERRORS as exc:
        raise PrepareToolError(str(exc)) from exc
    summary = index.summary()
    return PrepareOutput(summary=summary, report=render_prepare_summary(summary))


class TrainInput(_SubsetInput):
    model: Variant = Field(..., description="Model variant to train")
    data_dir: str = Field(..., description="Speech Commands root directory")
    out: str = Field(..., description="Checkpoint output path")
    seed: int = Field(default=0, ge=0)
    epochs: int | None = Field(default=None, ge=1, description="Override the 30-epoch schedule")


class TrainOutput(BaseModel):
    checkpoint_path: str
    steps_csv: str
    epochs_csv: str
    digest: str
    steps: int
    epochs: int
    best_validation_accuracy: float | None


class TrainToolError(RuntimeError):
    pass


def train_model(payload: TrainInput) -> TrainOutput:
    spec = model_spec(payload.model)
    cfg = train_config_for(spec, payload.seed, payload.epochs)
    try:
        index = build_index(payload.data_dir, keywords=payload.subset)
        result = train(spec, index, cfg)
    except _DATA_ERRORS + (SolverError, NonFiniteLoss) as exc:
        raise TrainToolError(str(exc)) from exc

    digest = config_digest(spec, cfg)
    state = result.state
    checkpoint_path = save_checkpoint(checkpoint_from_model(result.model, digest, state.epoch + 1), payload.out)
    steps_csv = write_csv(f"{payload.out}.steps.csv", STEP_HEADER, state.metrics.steps)
    epochs_csv = write_csv(
        f"{payload.out}.epochs.csv",
        EPOCH_HEADER,
        [(row.epoch + 1, row.val_accuracy, row.mean_nfe) for row in state.metrics.epochs],
    )
    return TrainOutput(
        checkpoint_path=str(checkpoint_path),
        steps_csv=str(steps_csv),
        epochs_csv=str(epochs_csv),
        digest=digest,
        steps=state.step,
        epochs=len(state.metrics.epochs),
        best_validation_accuracy=state.best_validation_accuracy,
    )


class EvaluationSession:
    """A loaded checkpoint and the feature cache of its dataset, reused across evaluations."""

    def __init__(self, ckpt: str, data_dir: str, subset: list[str] | None = None) -> None:
        checkpoint = load_checkpoint(ckpt)
        self.model = model_from_checkpoint(checkpoint)
        self.digest = checkpoint.digest
        self.cache = FeatureCache(build_index(data_dir, keywords=subset))

    def evaluate(
        self,
        split: Literal["validation", "test"],
        *,
        tolerance: float | None = None,
        batch_size: int = 1,
        bn_mode: BnMode = "lbn",
    ) -> EvalResult:
        result = evaluate_cached(self.model, self.cache, split, tolerance=tolerance, batch_size=batch_size, bn_mode=bn_mode)
        logger.info(
            "%s %s tol=%g batch=%d: accuracy=%.4f mean_nfe=%.2f",
            split,
            bn_mode,
            tolerance if tolerance is not None else self.model.spec.infer_tolerance,
            batch_size,
            result.accuracy,
            result.mean_nfe,
        )
        return result


class EvalInput(_SubsetInput):
    ckpt: str = Field(..., description="Checkpoint path")
    data_dir: str = Field(..., description="Speech Commands root directory")
    split: Literal["validation", "test"] = "test"
    tolerance: float | None = Field(default=None, gt=0, description="Defaults to the variant's inference tolerance")
    batch_size: int = Field(default=1, ge=1)
    bn: BnMode = "lbn"


class EvalOutput(BaseModel):
    variant: str
    split: str
    samples: int
    tolerance: float
    batch_size: int
    bn_mode: str
    accuracy: float
    mean_nfe: float
    total_params: int
    total_mults: int
    report: str


class EvalToolError(RuntimeError):
    pass


def open_session(ckpt: str, data_dir: str, subset: list[str] | None) -> EvaluationSession:
    try:
        return EvaluationSession(ckpt, data_dir, subset)
    except _DATA_ERRORS + _MODEL_ERRORS as exc:
        raise EvalToolError(str(exc)) from exc


def eval_checkpoint(payload: EvalInput, session: EvaluationSession | None = None) -> EvalOutput:
    session = session or open_session(payload.ckpt, payload.data_dir, payload.subset)
    tolerance = payload.tolerance if payload.tolerance is not None else session.model.spec.infer_tolerance
    try:
        result = session.evaluate(payload.split, tolerance=tolerance, batch_size=payload.batch_size, bn_mode=payload.bn)
    except _DATA_ERRORS + _MODEL_ERRORS as exc:
        raise EvalToolError(str(exc)) from exc

    fields = {
        "variant": session.model.spec.variant,
        "split": payload.split,
        "samples": result.samples,
        "tolerance": tolerance,
        "batch_size": payload.batch_size,
        "bn_mode": payload.bn,
        "accuracy": result.accuracy,
        "mean_nfe": result.mean_nfe,
        "total_params": session.model.cost().total_params,
        "total_mults": result.total_mults,
    }
    return EvalOutput(**fields, report=render_eval_report(fields))


class CountInput(BaseModel):
    model: Variant | Literal["all"] = Field(..., description="Model variant, or 'all' for a comparison table")
    nfe: float = Field(default=0.0, ge=0, description="Number of function evaluations of the ODE block")


class CountOutput(BaseModel):
    reports: list[CostReport]
    report: str


class CountToolError(RuntimeError):
    pass


def count(payload: CountInput) -> CountOutput:
    variants = VARIANTS if payload.model == "all" else (payload.model,)
    try:
        reports = [cost_report(model_spec(variant)) for variant in variants]
    except ValueError as exc:
        raise CountToolError(str(exc)) from exc
    if payload.model == "all":
        text = render_cost_table(reports)
    else:
        text = render_cost_report(reports[0], payload.nfe)
    return CountOutput(reports=reports, report=text)


class SweepInput(BaseModel):
    ckpt: str = Field(..., description="Checkpoint path")
    axis: Literal["tolerance", "batch"]
    values: list[float] = Field(..., min_length=1)
    csv: str = Field(..., description="Output CSV path")

    @field_validator("values")
    @classmethod
    def _validate_values(cls, values: list[float]) -> list[float]:
        if any(value <= 0 for value in values):
            raise ValueError("sweep values must be positive")
        return values

    @model_validator(mode="after")
    def _check_batch_axis(self) -> SweepInput:
        if self.axis == "batch" and any(value != int(value) for value in self.values):
            raise ValueError("batch sizes must be whole numbers")
        return self

    def batch_sizes(self) -> list[int]:
        return [int(value) for value in self.values]


class SweepToolError(RuntimeError):
    pass


class CompareInput(BaseModel):
    ckpts: list[str] = Field(..., min_length=1, description="Checkpoints to compare, e.g. \"a.ckpt,b.ckpt\"")
    csv: str = Field(..., description="Output CSV path")

    @field_validator("ckpts", mode="before")
    @classmethod
    def _split_paths(cls, value: list[str] | str) -> list[str]:
        paths = value.split(",") if isinstance(value, str) else value
        return [path.strip() for path in paths if path.strip()]


class CompareToolError(RuntimeError):
    pass
