from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from apps.engine.autodiff import (
    Parameter,
    Tensor,
    affine,
    avg_pool_temporal,
    conv_temporal,
    init_uniform,
    relu,
    reshape,
)
from apps.engine.lbn import LbnDatabase, LbnLayer, lbn_infer, lbn_train, naive_bn_infer
from apps.engine.ode import Mode, OdeConfig, SolveResult, dopri5_solve, fixed_step_solve


logger = logging.getLogger(__name__)

Variant = Literal["ode-tcnn20", "ode-tcnn30", "ode-tdnn32", "ode-tdnn29"]
VARIANTS: tuple[Variant, ...] = ("ode-tcnn20", "ode-tcnn30", "ode-tdnn32", "ode-tdnn29")

INPUT_FRAMES = 101
INPUT_COEFFS = 40
N_CLASSES = 12
STEM_TIME_KEY = 0.0

_PRESETS: dict[str, dict] = {
    "ode-tcnn20": {"channels_or_dim": 20, "depth_T": 1.0, "infer_tolerance": 0.5},
    "ode-tcnn30": {"channels_or_dim": 30, "depth_T": 1.0, "infer_tolerance": 0.5},
    "ode-tdnn32": {"channels_or_dim": 32, "depth_T": 3.0, "infer_tolerance": 1e-2},
    "ode-tdnn29": {"channels_or_dim": 29, "depth_T": 3.0, "infer_tolerance": 5e-3},
}


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    variant: Variant
    channels_or_dim: int = Field(..., ge=1)
    depth_T: float = Field(..., gt=0)
    train_tolerance: float = Field(default=1e-3, gt=0)
    infer_tolerance: float = Field(..., gt=0)
    n_classes: int = Field(default=N_CLASSES, ge=2)

    @model_validator(mode="after")
    def _check_preset(self) -> ModelSpec:
        preset = _PRESETS[self.variant]
        for key, expected in preset.items():
            if getattr(self, key) != expected:
                raise ValueError(f"{self.variant} requires {key}={expected}")
        return self

    @property
    def family(self) -> Literal["tcnn", "tdnn"]:
        return "tcnn" if self.variant.startswith("ode-tcnn") else "tdnn"


def model_spec(variant: str) -> ModelSpec:
    if variant not in _PRESETS:
        raise ValueError(f"unknown model variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return ModelSpec(variant=variant, **_PRESETS[variant])


@dataclass(slots=True, frozen=True)
class LayerSpec:
    name: str
    kind: Literal["conv", "avgpool", "tdnn", "tdnn_sub", "fc"]
    m_or_w: int
    stride: int
    in_channels: int
    channels: int
    length: int
    padding: int = 0
    in_ode: bool = False
    r: int = 1

    @property
    def params(self) -> int:
        if self.kind == "avgpool":
            return 0
        if self.kind == "fc":
            return self.in_channels * self.channels
        return self.m_or_w * self.r * self.in_channels * self.channels

    @property
    def mults(self) -> int:
        # every output position counts in full, padded edges included
        return self.params * self.length


class CostRow(BaseModel):
    name: str
    kind: str
    m_or_w: int
    channels: int
    length: int
    params: int
    mults: int
    in_ode: bool


class CostReport(BaseModel):
    variant: str
    rows: list[CostRow]
    total_params: int
    mults_fixed: int
    mults_per_eval: int

    def total_mults(self, nfe: float) -> int:
        return int(round(self.mults_fixed + self.mults_per_eval * nfe))


@dataclass(slots=True)
class ForwardResult:
    logits: Tensor
    nfe: list[int]
    solves: list[SolveResult]


def layer_specs(spec: ModelSpec) -> tuple[LayerSpec, ...]:
    width = spec.channels_or_dim
    if spec.family == "tcnn":
        pooled = (INPUT_FRAMES - 4) // 4 + 1
        return (
            LayerSpec("stem.conv", "conv", 3, 1, INPUT_COEFFS, width, INPUT_FRAMES, padding=1),
            LayerSpec("stem.pool", "avgpool", 4, 4, width, width, pooled),
            LayerSpec("ode.conv1", "conv", 9, 1, width, width, pooled, padding=4, in_ode=True),
            LayerSpec("ode.conv2", "conv", 9, 1, width, width, pooled, padding=4, in_ode=True),
            LayerSpec("ode.conv3", "conv", 1, 1, width, width, pooled, in_ode=True),
            LayerSpec("head.pool", "avgpool", pooled, pooled, width, width, 1),
            LayerSpec("head.fc", "fc", 1, 1, width, spec.n_classes, 1),
        )
    subsampled = (INPUT_FRAMES + 2 - 3) // 3 + 1
    return (
        LayerSpec("stem.tdnn_sub", "tdnn_sub", 3, 3, INPUT_COEFFS, width, subsampled, padding=1),
        LayerSpec("ode.tdnn", "tdnn", 3, 1, width, width, subsampled, padding=1, in_ode=True),
        LayerSpec("head.pool", "avgpool", subsampled, subsampled, width, width, 1),
        LayerSpec("head.fc", "fc", 1, 1, width, spec.n_classes, 1),
    )


class KwsOdeModel:
    """Stem, ODE block and classifier head of one variant, plus its L-BN database."""

    def __init__(
        self,
        spec: ModelSpec,
        parameters: dict[str, Parameter],
        database: LbnDatabase | None = None,
    ) -> None:
        self.spec = spec
        self.layers = {layer.name: layer for layer in layer_specs(spec)}
        self.params = parameters
        self.database = database if database is not None else LbnDatabase()
        width = spec.channels_or_dim
        ode_norms = 3 if spec.family == "tcnn" else 1
        self.norms = {"stem.norm": LbnLayer("stem.norm", width)}
        for index in range(1, ode_norms + 1):
            self.norms[f"ode.norm{index}"] = LbnLayer(f"ode.norm{index}", width)

        expected = parameter_dims(spec)
        actual = {name: tuple(param.dims) for name, param in parameters.items()}
        if actual != expected:
            raise ValueError(f"parameters {sorted(actual)} do not match {spec.variant} layout {sorted(expected)}")

    def parameters(self) -> list[Parameter]:
        return [self.params[name] for name in sorted(self.params)]

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def dynamics(self, h: Tensor, t: float, mode: Mode) -> Tensor:
        if self.spec.family == "tcnn":
            return dynamics_tcnn(self, h, t, mode)
        return dynamics_tdnn(self, h, t, mode)

    def norm(self, x: Tensor, t: float, layer_id: str, mode: Mode) -> Tensor:
        layer = self.norms[layer_id]
        if mode == "train":
            return lbn_train(x, t, layer, self.database)
        if mode == "naive":
            return naive_bn_infer(x, layer)
        return lbn_infer(x, t, layer, self.database)

    def forward(
        self,
        features: np.ndarray,
        mode: Mode = "infer",
        tolerance: float | None = None,
        fixed_steps: int | None = None,
    ) -> ForwardResult:
        return forward(self, features, mode=mode, tolerance=tolerance, fixed_steps=fixed_steps)

    def cost(self) -> CostReport:
        return cost(self)


def parameter_dims(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    dims: dict[str, tuple[int, ...]] = {}
    for layer in layer_specs(spec):
        if layer.kind == "avgpool":
            continue
        if layer.kind == "fc":
            dims[f"{layer.name}.weight"] = (layer.in_channels, layer.channels)
        else:
            dims[f"{layer.name}.kernel"] = (layer.m_or_w, layer.in_channels, layer.channels)
    return dims


def build_model(spec: ModelSpec, seed: int) -> KwsOdeModel:
    rng = np.random.default_rng(seed)
    parameters: dict[str, Parameter] = {}
    for name, dims in sorted(parameter_dims(spec).items()):
        fan_in = dims[0] if len(dims) == 2 else dims[0] * dims[1]
        parameters[name] = init_uniform(name, dims, fan_in, rng)
    return KwsOdeModel(spec, parameters)


def dynamics_tcnn(model: KwsOdeModel, h: Tensor, t: float, mode: Mode) -> Tensor:
    """f(h, t): conv9 -> L-BN -> relu -> conv9 -> L-BN -> relu -> conv1 -> L-BN."""
    p = model.params
    out = conv_temporal(h, p["ode.conv1.kernel"], stride=1, padding=4)
    out = relu(model.norm(out, t, "ode.norm1", mode))
    out = conv_temporal(out, p["ode.conv2.kernel"], stride=1, padding=4)
    out = relu(model.norm(out, t, "ode.norm2", mode))
    out = conv_temporal(out, p["ode.conv3.kernel"], stride=1, padding=0)
    return model.norm(out, t, "ode.norm3", mode)


def dynamics_tdnn(model: KwsOdeModel, h: Tensor, t: float, mode: Mode) -> Tensor:
    """g(h, t): tdnn(w=3, s=1) -> L-BN -> relu."""
    out = conv_temporal(h, model.params["ode.tdnn.kernel"], stride=1, padding=1)
    return relu(model.norm(out, t, "ode.norm1", mode))


def forward(
    model: KwsOdeModel,
    features: np.ndarray,
    *,
    mode: Mode = "infer",
    tolerance: float | None = None,
    fixed_steps: int | None = None,
) -> ForwardResult:
    """Logits for a batch of feature matrices (or a single one).

    In ``infer`` mode every sample is solved on its own, so its logits never
    depend on the rest of the batch. ``train`` and ``naive`` use batch
    statistics and solve the whole batch with one step sequence.
    """
    batch = np.asarray(features)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.shape[1:] != (INPUT_FRAMES, INPUT_COEFFS):
        raise ValueError(f"features must be {INPUT_FRAMES} x {INPUT_COEFFS}, got {batch.shape[1:]}")
    if tolerance is None:
        tolerance = model.spec.train_tolerance if mode == "train" else model.spec.infer_tolerance
    cfg = OdeConfig(tolerance=tolerance, depth_T=model.spec.depth_T)

    if mode != "infer":
        logits, solve = _forward_joint(model, batch, mode, cfg, fixed_steps)
        return ForwardResult(logits=logits, nfe=[solve.nfe] * batch.shape[0], solves=[solve])

    rows, solves = [], []
    for sample in batch:
        logits, solve = _forward_joint(model, sample[None], mode, cfg, fixed_steps)
        rows.append(logits.data)
        solves.append(solve)
    return ForwardResult(
        logits=Tensor(np.concatenate(rows)),
        nfe=[solve.nfe for solve in solves],
        solves=solves,
    )


def _forward_joint(
    model: KwsOdeModel,
    batch: np.ndarray,
    mode: Mode,
    cfg: OdeConfig,
    fixed_steps: int | None,
) -> tuple[Tensor, SolveResult]:
    p = model.params
    x = Tensor(batch)
    if model.spec.family == "tcnn":
        h = conv_temporal(x, p["stem.conv.kernel"], stride=1, padding=1)
        h = relu(model.norm(h, STEM_TIME_KEY, "stem.norm", mode))
        h = avg_pool_temporal(h, window=4, stride=4)
    else:
        h = conv_temporal(x, p["stem.tdnn_sub.kernel"], stride=3, padding=1)
        h = relu(model.norm(h, STEM_TIME_KEY, "stem.norm", mode))

    if fixed_steps is not None:
        solve = fixed_step_solve(model.dynamics, h, fixed_steps, cfg, mode)
    else:
        solve = dopri5_solve(model.dynamics, h, cfg, mode)

    state = solve.terminal_state
    length, width = state.dims[1], state.dims[2]
    pooled = reshape(avg_pool_temporal(state, window=length, stride=length), (state.dims[0], width))
    return affine(pooled, p["head.fc.weight"]), solve


def cost(model: KwsOdeModel) -> CostReport:
    return cost_report(model.spec)


def cost_report(spec: ModelSpec) -> CostReport:
    """Parameter and multiply counts; layers inside the ODE block are counted per evaluation."""
    rows = [
        CostRow(
            name=layer.name,
            kind=layer.kind,
            m_or_w=layer.m_or_w,
            channels=layer.channels,
            length=layer.length,
            params=layer.params,
            mults=layer.mults,
            in_ode=layer.in_ode,
        )
        for layer in layer_specs(spec)
    ]
    return CostReport(
        variant=spec.variant,
        rows=rows,
        total_params=sum(row.params for row in rows),
        mults_fixed=sum(row.mults for row in rows if not row.in_ode),
        mults_per_eval=sum(row.mults for row in rows if row.in_ode),
    )
