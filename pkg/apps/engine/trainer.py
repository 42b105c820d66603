from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from apps.engine.autodiff import Parameter, Tape, backward, softmax_xent
from apps.engine.dataset import Batch, DatasetIndex, FeatureCache, Split, batches
from apps.engine.lbn import epoch_reset
from apps.engine.models import KwsOdeModel, ModelSpec, build_model


logger = logging.getLogger(__name__)

BnMode = Literal["lbn", "naive"]

_SCHEDULES: dict[str, dict] = {
    "tcnn": {"decay_steps": (5000, 9000), "weight_decay": 1e-3},
    "tdnn": {"decay_steps": (6000, 10000), "weight_decay": 1e-5},
}


class NonFiniteLoss(RuntimeError):
    """Raised when a training step produces a NaN or infinite loss."""


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr0: float = Field(default=0.1, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    batch_size: int = Field(default=64, ge=1)
    epochs: int = Field(default=30, ge=1)
    decay_steps: tuple[int, ...] = (5000, 9000)
    decay_factor: float = Field(default=0.1, gt=0, le=1)
    weight_decay: float = Field(default=1e-3, ge=0)
    train_tolerance: float = Field(default=1e-3, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_schedule(self) -> TrainConfig:
        if any(step <= 0 for step in self.decay_steps):
            raise ValueError("decay_steps must be positive")
        if list(self.decay_steps) != sorted(set(self.decay_steps)):
            raise ValueError("decay_steps must be strictly increasing")
        return self


def train_config_for(spec: ModelSpec, seed: int, epochs: int | None = None) -> TrainConfig:
    schedule = _SCHEDULES[spec.family]
    overrides = {"epochs": epochs} if epochs is not None else {}
    return TrainConfig(seed=seed, train_tolerance=spec.train_tolerance, **schedule, **overrides)


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    passed = sum(1 for boundary in cfg.decay_steps if boundary <= step)
    return cfg.lr0 * cfg.decay_factor**passed


def steps_per_epoch(entries: int, batch_size: int) -> int:
    return math.ceil(entries / batch_size)


@dataclass(slots=True)
class EpochMetrics:
    epoch: int
    val_accuracy: float | None
    mean_nfe: float | None
    train_mean_nfe: float
    mean_loss: float


@dataclass(slots=True)
class MetricsLog:
    steps: list[tuple[int, float]] = field(default_factory=list)
    epochs: list[EpochMetrics] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps) + len(self.epochs)


@dataclass(slots=True)
class TrainState:
    step: int = 0
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    best_validation_accuracy: float | None = None
    metrics: MetricsLog = field(default_factory=MetricsLog)
    step_nfe: list[int] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: KwsOdeModel) -> TrainState:
        return cls(velocity={param.name: np.zeros_like(param.data) for param in model.parameters()})


@dataclass(slots=True)
class EvalResult:
    accuracy: float
    mean_nfe: float
    total_mults: int
    samples: int
    predictions: np.ndarray


@dataclass(slots=True)
class TrainResult:
    model: KwsOdeModel
    config: TrainConfig
    state: TrainState


def apply_momentum_update(
    params: Iterable[Parameter],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """g' = g + wd * w; v = momentum * v + g'; w -= lr * v (in place)."""
    for param in params:
        grad = param.grad + weight_decay * param.data
        current = velocity.get(param.name)
        if current is None or current.shape != param.data.shape:
            raise ValueError(f"velocity for {param.name!r} does not match the parameter")
        velocity[param.name] = (momentum * current + grad).astype(param.data.dtype)
        param.data -= (lr * velocity[param.name]).astype(param.data.dtype)


def sgd_step(model: KwsOdeModel, batch: Batch, state: TrainState, cfg: TrainConfig) -> float:
    """One momentum-SGD update on ``batch``; returns the batch's mean cross-entropy."""
    model.zero_grad()
    with Tape() as tape:
        result = model.forward(batch.features, mode="train", tolerance=cfg.train_tolerance)
        loss = softmax_xent(result.logits, batch.labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"loss became {value} at step {state.step}")
        backward(tape, loss)

    lr = lr_at(state.step, cfg)
    apply_momentum_update(model.parameters(), state.velocity, lr, cfg.momentum, cfg.weight_decay)
    state.metrics.steps.append((state.step, value))
    state.step_nfe.append(result.nfe[0])
    logger.debug("step %d: loss=%.4f lr=%.4g nfe=%d", state.step, value, lr, result.nfe[0])
    state.step += 1
    return value


def train(
    spec: ModelSpec,
    index: DatasetIndex,
    cfg: TrainConfig,
    *,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> TrainResult:
    """Train ``spec`` from scratch. The shipped L-BN database is the final epoch's."""
    model = build_model(spec, cfg.seed)
    state = TrainState.for_model(model)
    cache = FeatureCache(index)
    has_validation = bool(index.split("validation"))
    if not has_validation:
        logger.warning("validation split is empty; per-epoch accuracy will not be reported")

    logger.info(
        "training %s: %d entries, %d steps per epoch, %d epochs",
        spec.variant,
        len(index.split("train")),
        steps_per_epoch(len(index.split("train")), cfg.batch_size),
        cfg.epochs,
    )

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        epoch_reset(model.database)
        first_step = state.step
        nfe_start = len(state.step_nfe)
        for batch in batches(
            index,
            "train",
            cfg.batch_size,
            shuffle=True,
            seed=cfg.seed,
            augmenting=True,
            epoch=epoch,
            cache=cache,
        ):
            sgd_step(model, batch, state, cfg)

        losses = [loss for step, loss in state.metrics.steps if step >= first_step]
        epoch_nfe = state.step_nfe[nfe_start:]
        val_accuracy = val_nfe = None
        if has_validation:
            result = evaluate_cached(model, cache, "validation", tolerance=spec.infer_tolerance, batch_size=cfg.batch_size)
            val_accuracy, val_nfe = result.accuracy, result.mean_nfe
            if state.best_validation_accuracy is None or val_accuracy > state.best_validation_accuracy:
                state.best_validation_accuracy = val_accuracy

        metrics = EpochMetrics(
            epoch=epoch,
            val_accuracy=val_accuracy,
            mean_nfe=val_nfe,
            train_mean_nfe=float(np.mean(epoch_nfe)) if epoch_nfe else 0.0,
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
        )
        state.metrics.epochs.append(metrics)
        logger.debug(
            "L-BN database: %d records over %d layers",
            len(model.database),
            len(model.database.layer_ids()),
        )
        logger.info(
            "epoch %d/%d: loss=%.4f train_nfe=%.1f val_acc=%s val_nfe=%s best=%s",
            epoch + 1,
            cfg.epochs,
            metrics.mean_loss,
            metrics.train_mean_nfe,
            _fmt(val_accuracy),
            _fmt(val_nfe),
            _fmt(state.best_validation_accuracy),
        )
        if on_epoch is not None:
            on_epoch(metrics)

    return TrainResult(model=model, config=cfg, state=state)


def evaluate(
    model: KwsOdeModel,
    index: DatasetIndex,
    split: Split,
    *,
    tolerance: float | None = None,
    batch_size: int = 1,
    bn_mode: BnMode = "lbn",
    cache: FeatureCache | None = None,
) -> EvalResult:
    return evaluate_cached(
        model,
        cache or FeatureCache(index),
        split,
        tolerance=tolerance,
        batch_size=batch_size,
        bn_mode=bn_mode,
    )


def evaluate_cached(
    model: KwsOdeModel,
    cache: FeatureCache,
    split: Split,
    *,
    tolerance: float | None = None,
    batch_size: int = 1,
    bn_mode: BnMode = "lbn",
) -> EvalResult:
    features, labels = cache.split_arrays(split)
    return evaluate_features(model, features, labels, tolerance=tolerance, batch_size=batch_size, bn_mode=bn_mode)


def evaluate_features(
    model: KwsOdeModel,
    features: np.ndarray,
    labels: np.ndarray,
    *,
    tolerance: float | None = None,
    batch_size: int = 1,
    bn_mode: BnMode = "lbn",
) -> EvalResult:
    """Top-1 accuracy, mean NFE per sample and total multiplies at that NFE."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if features.shape[0] == 0 or features.shape[0] != labels.shape[0]:
        raise ValueError("features and labels must be aligned and non-empty")
    tolerance = tolerance if tolerance is not None else model.spec.infer_tolerance
    mode = "infer" if bn_mode == "lbn" else "naive"

    predictions, nfe = [], []
    for start in range(0, features.shape[0], batch_size):
        result = model.forward(features[start : start + batch_size], mode=mode, tolerance=tolerance)
        predictions.append(np.argmax(result.logits.data, axis=1))
        nfe.extend(result.nfe)

    predicted = np.concatenate(predictions)
    mean_nfe = float(np.mean(nfe))
    return EvalResult(
        accuracy=float(np.mean(predicted == labels)),
        mean_nfe=mean_nfe,
        total_mults=model.cost().total_mults(mean_nfe),
        samples=int(labels.shape[0]),
        predictions=predicted,
    )


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"
