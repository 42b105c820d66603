from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from apps.engine.autodiff import ShapeError, Tensor, active_tape, lincomb


logger = logging.getLogger(__name__)

Mode = Literal["train", "infer", "naive"]

# Dormand-Prince 5(4) tableau. Stage 7 is evaluated at the 5th-order solution
# and doubles as stage 1 of the next step (first-same-as-last).
NODES = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
STAGE_COEFFS = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
WEIGHTS_5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# difference between the 5th- and embedded 4th-order weights
ERROR_WEIGHTS = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


class SolverError(RuntimeError):
    pass


class StepUnderflow(SolverError):
    pass


class StepBudgetExceeded(SolverError):
    pass


class NonFiniteState(SolverError):
    pass


class DynamicsFn(Protocol):
    def __call__(self, h: Tensor, t: float, mode: Mode) -> Tensor: ...


class OdeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    tolerance: float = Field(default=1e-3, gt=0, description="Relative and absolute error tolerance")
    depth_T: float = Field(default=1.0, gt=0, description="Terminal integration time")
    initial_step: float | None = Field(default=None, gt=0, description="Defaults to depth_T / 10")
    max_steps: int = Field(default=1000, ge=1)
    safety: float = Field(default=0.9, gt=0, le=1)
    growth_clamp: tuple[float, float] = (0.2, 10.0)
    min_step_floor: float = Field(default=1e-10, gt=0)

    @model_validator(mode="after")
    def _check_steps(self) -> OdeConfig:
        if self.initial_step is not None and self.initial_step > self.depth_T:
            raise ValueError("initial_step must not exceed depth_T")
        low, high = self.growth_clamp
        if not 0 < low < 1 < high:
            raise ValueError("growth_clamp must satisfy 0 < min < 1 < max")
        return self

    @property
    def first_step(self) -> float:
        return self.initial_step if self.initial_step is not None else self.depth_T / 10


@dataclass(slots=True)
class SolveResult:
    terminal_state: Tensor
    nfe: int
    accepted_steps: int
    rejected_steps: int
    visited_times: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)


def dopri5_solve(f: DynamicsFn, h0: Tensor, cfg: OdeConfig, mode: Mode = "infer") -> SolveResult:
    """Adaptive Dormand-Prince integration of dh/dt = f(h, t) over [0, depth_T].

    Every stage evaluation of an accepted step stays on the active tape, so the
    discrete computation is differentiable; stages of rejected steps are rewound
    off the tape. Step-size control itself is not differentiated.
    """
    _require_finite(h0.data, 0.0)
    tape = active_tape()
    depth = cfg.depth_T
    low, high = cfg.growth_clamp

    visited = [0.0]
    k_first = _evaluate(f, h0, 0.0, mode)
    nfe = 1

    t = 0.0
    y = h0
    step = cfg.first_step
    accepted = rejected = 0
    step_sizes: list[float] = []

    while t < depth:
        if accepted + rejected >= cfg.max_steps:
            raise StepBudgetExceeded(f"more than {cfg.max_steps} steps before reaching t={depth}")
        if step < cfg.min_step_floor * depth:
            raise StepUnderflow(f"step size {step:.3e} fell below floor at t={t:.6f}")

        dt = min(step, depth - t)
        t_next = depth if dt >= depth - t else t + dt
        mark = tape.mark() if tape is not None else 0

        stages, y_next = _dopri_step(f, y, k_first, t, dt, t_next, mode, visited)
        nfe += len(stages) - 1
        err_norm = _error_norm(stages, dt, y.data, y_next.data, cfg.tolerance)

        if err_norm <= 1.0:
            accepted += 1
            step_sizes.append(dt)
            t, y, k_first = t_next, y_next, stages[-1]
        else:
            rejected += 1
            if tape is not None:
                tape.rewind(mark)
            logger.debug("rejected step dt=%.4g at t=%.4g (err_norm=%.3g)", dt, t, err_norm)

        factor = high if err_norm == 0.0 else min(high, max(low, cfg.safety * err_norm ** (-1 / 5)))
        step = dt * factor

    return SolveResult(
        terminal_state=y,
        nfe=nfe,
        accepted_steps=accepted,
        rejected_steps=rejected,
        visited_times=visited,
        step_sizes=step_sizes,
    )


def fixed_step_solve(
    f: DynamicsFn,
    h0: Tensor,
    n_steps: int,
    cfg: OdeConfig,
    mode: Mode = "infer",
) -> SolveResult:
    """Equal steps of the same tableau with no error control (the residual-network limit)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    _require_finite(h0.data, 0.0)
    depth = cfg.depth_T

    visited = [0.0]
    k_first = _evaluate(f, h0, 0.0, mode)
    nfe = 1
    y = h0
    step_sizes: list[float] = []
    for index in range(n_steps):
        t = depth * index / n_steps
        t_next = depth * (index + 1) / n_steps
        dt = t_next - t
        stages, y = _dopri_step(f, y, k_first, t, dt, t_next, mode, visited)
        nfe += len(stages) - 1
        k_first = stages[-1]
        step_sizes.append(dt)

    return SolveResult(
        terminal_state=y,
        nfe=nfe,
        accepted_steps=n_steps,
        rejected_steps=0,
        visited_times=visited,
        step_sizes=step_sizes,
    )


def _dopri_step(
    f: DynamicsFn,
    y: Tensor,
    k_first: Tensor,
    t: float,
    dt: float,
    t_next: float,
    mode: Mode,
    visited: list[float],
) -> tuple[list[Tensor], Tensor]:
    stages = [k_first]
    for index in range(1, 6):
        terms = [(dt * coef, stages[j]) for j, coef in enumerate(STAGE_COEFFS[index])]
        t_stage = t + NODES[index] * dt
        visited.append(t_stage)
        stages.append(_evaluate(f, lincomb(y, terms), t_stage, mode))

    y_next = lincomb(y, [(dt * weight, stage) for weight, stage in zip(WEIGHTS_5, stages)])
    visited.append(t_next)
    stages.append(_evaluate(f, y_next, t_next, mode))
    return stages, y_next


def _evaluate(f: DynamicsFn, h: Tensor, t: float, mode: Mode) -> Tensor:
    out = f(h, t, mode)
    if out.data.shape != h.data.shape:
        raise ShapeError(f"dynamics changed state dims from {h.dims} to {out.dims}")
    _require_finite(out.data, t)
    return out


def _error_norm(stages: list[Tensor], dt: float, start: np.ndarray, end: np.ndarray, tolerance: float) -> float:
    error = np.zeros(start.shape, dtype=np.float64)
    for weight, stage in zip(ERROR_WEIGHTS, stages):
        if weight != 0.0:
            error += (dt * weight) * stage.data
    scale = tolerance + tolerance * np.maximum(np.abs(start), np.abs(end))
    return float(np.sqrt(np.mean(np.square(error / scale))))


def _require_finite(values: np.ndarray, t: float) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteState(f"non-finite state encountered at t={t:.6f}")
