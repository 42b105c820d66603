from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand dimensions do not conform."""


class GraphError(RuntimeError):
    pass


_DTYPE: ContextVar[np.dtype] = ContextVar("kws_engine_dtype", default=np.dtype(np.float32))
_ACTIVE_TAPE: ContextVar["Tape | None"] = ContextVar("kws_engine_tape", default=None)


def engine_dtype() -> np.dtype:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype: type[np.floating] | np.dtype) -> Iterator[None]:
    """Switch the engine between 32-bit and 64-bit floats for the enclosed block."""
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported engine precision: {resolved}")
    token = _DTYPE.set(resolved)
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data: object, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=engine_dtype())
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        return out

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype})"


class Parameter(Tensor):
    __slots__ = ("name", "grad")

    def __init__(self, name: str, data: object) -> None:
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, dims={self.dims})"


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(slots=True)
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of executed primitives; active while used as a context manager."""

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def mark(self) -> int:
        return len(self._records)

    def rewind(self, mark: int) -> None:
        del self._records[mark:]

    def clear(self) -> None:
        self._records.clear()

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        self._records.append(_Record(output=output, inputs=inputs, backward=backward_fn))

    def produced(self, tensor: Tensor) -> bool:
        return any(record.output is tensor for record in self._records)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs_grad = tape is not None and any(item.requires_grad for item in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(out, inputs, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` of every Parameter reached from ``loss``, then clear the tape."""
    if loss.data.size != 1:
        raise GraphError(f"loss must be a scalar, got dims {loss.dims}")
    if not loss.requires_grad or not tape.produced(loss):
        raise GraphError("loss was not produced by operations recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for record in reversed(tape._records):
        upstream = grads.pop(id(record.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(record.inputs, record.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            if isinstance(tensor, Parameter):
                tensor.grad = tensor.grad + grad
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
    tape.clear()


def init_uniform(name: str, dims: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Parameter:
    bound = float(np.sqrt(6.0 / fan_in))
    return Parameter(name, rng.uniform(-bound, bound, size=dims))


# ----------------------------------------------------------------------------
# elementwise and structural primitives
# ----------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dims(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dims(a, b, "mul")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def lincomb(base: Tensor, terms: Sequence[tuple[float, Tensor]]) -> Tensor:
    """``base + sum(c * x for c, x in terms)``; zero coefficients are skipped."""
    active = [(coef, tensor) for coef, tensor in terms if coef != 0.0]
    out = base.data.copy()
    for coef, tensor in active:
        _require_same_dims(base, tensor, "lincomb")
        out += coef * tensor.data
    inputs = (base,) + tuple(tensor for _, tensor in active)
    coefs = [coef for coef, _ in active]
    return _emit(out, inputs, lambda g: (g, *(g * coef for coef in coefs)))


def sum_all(a: Tensor) -> Tensor:
    return _emit(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), lambda g: (np.full_like(a.data, g),))


def reshape(a: Tensor, dims: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(dims)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.dims} to {dims}") from exc
    return _emit(out, (a,), lambda g: (g.reshape(a.data.shape),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


# ----------------------------------------------------------------------------
# temporal layers (inputs are batch x length x channels, or length x channels)
# ----------------------------------------------------------------------------


def conv_temporal(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free cross-correlation along time; kernel dims are (m, c_in, c_out)."""
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} padding={padding}")
    if kernel.data.ndim != 3:
        raise ShapeError(f"kernel must be m x c_in x c_out, got {kernel.dims}")
    data, squeeze = _as_batched(x)
    m, c_in, _ = kernel.data.shape
    if data.shape[2] != c_in:
        raise ShapeError(f"input has {data.shape[2]} channels, kernel expects {c_in}")

    length = data.shape[1]
    padded = np.pad(data, ((0, 0), (padding, padding), (0, 0)))
    out_len = (length + 2 * padding - m) // stride + 1
    if out_len < 1:
        raise ShapeError(f"kernel length {m} exceeds padded input length {padded.shape[1]}")

    # windows: batch x out_len x c_in x m
    windows = sliding_window_view(padded, m, axis=1)[:, ::stride][:, :out_len]
    out = np.tensordot(windows, kernel.data, axes=([2, 3], [1, 0]))

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g3 = g[None] if squeeze else g
        grad_kernel = np.tensordot(windows, g3, axes=([0, 1], [0, 1])).transpose(1, 0, 2)
        grad_padded = np.zeros_like(padded)
        span = stride * (out_len - 1) + 1
        for tap in range(m):
            grad_padded[:, tap : tap + span : stride] += g3 @ kernel.data[tap].T
        grad_x = grad_padded[:, padding : padding + length]
        return (grad_x[0] if squeeze else grad_x), grad_kernel

    return _emit(out[0] if squeeze else out, (x, kernel), _backward)


def avg_pool_temporal(x: Tensor, window: int, stride: int) -> Tensor:
    if window < 1 or stride < 1:
        raise ShapeError(f"invalid window={window} stride={stride}")
    data, squeeze = _as_batched(x)
    length = data.shape[1]
    if window > length:
        raise ShapeError(f"pooling window {window} exceeds input length {length}")
    out_len = (length - window) // stride + 1
    windows = sliding_window_view(data, window, axis=1)[:, ::stride][:, :out_len]
    out = windows.mean(axis=-1).astype(data.dtype)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        g3 = (g[None] if squeeze else g) / window
        grad = np.zeros_like(data)
        span = stride * (out_len - 1) + 1
        for tap in range(window):
            grad[:, tap : tap + span : stride] += g3
        return (grad[0] if squeeze else grad,)

    return _emit(out[0] if squeeze else out, (x,), _backward)


def affine(x: Tensor, weight: Tensor) -> Tensor:
    """Bias-free ``x @ weight`` for a vector or a batch of row vectors."""
    if weight.data.ndim != 2 or x.data.shape[-1] != weight.data.shape[0] or x.data.ndim not in (1, 2):
        raise ShapeError(f"cannot apply weight {weight.dims} to input {x.dims}")

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if x.data.ndim == 1:
            return g @ weight.data.T, np.outer(x.data, g)
        return g @ weight.data.T, x.data.T @ g

    return _emit(x.data @ weight.data, (x, weight), _backward)


def softmax_xent(logits: Tensor, labels: Sequence[int] | np.ndarray | int) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch, max-subtracted."""
    batch = logits.data if logits.data.ndim == 2 else logits.data[None]
    targets = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.data.ndim not in (1, 2) or targets.shape != (batch.shape[0],):
        raise ShapeError(f"logits {logits.dims} do not align with {targets.shape[0]} labels")
    if targets.min() < 0 or targets.max() >= batch.shape[1]:
        raise ShapeError(f"labels must lie in [0, {batch.shape[1] - 1}]")

    shifted = batch - batch.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch.shape[0])
    loss = (log_norm - shifted[rows, targets]).mean()

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, targets] -= 1.0
        grad = probs * (g / batch.shape[0])
        return (grad if logits.data.ndim == 2 else grad[0],)

    return _emit(np.asarray(loss, dtype=logits.data.dtype), (logits,), _backward)


# ----------------------------------------------------------------------------
# normalization arithmetic over batch and time axes
# ----------------------------------------------------------------------------


def batch_norm(x: Tensor, epsilon: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize by the batch's own per-channel statistics.

    Returns the normalized tensor and the (mean, biased variance) pair that was
    used; the gradient flows through both statistics.
    """
    data, squeeze = _as_batched(x)
    count = data.shape[0] * data.shape[1]
    mean = data.mean(axis=(0, 1))
    var = data.var(axis=(0, 1))
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = ((data - mean) * inv_std).astype(data.dtype)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        g3 = g[None] if squeeze else g
        g_sum = g3.sum(axis=(0, 1))
        gx_sum = (g3 * xhat).sum(axis=(0, 1))
        grad = (inv_std / count) * (count * g3 - g_sum - xhat * gx_sum)
        return (grad[0] if squeeze else grad,)

    out = _emit(xhat[0] if squeeze else xhat, (x,), _backward)
    return out, mean, var


def normalize(x: Tensor, mean: np.ndarray, var: np.ndarray, epsilon: float) -> Tensor:
    """Normalize by fixed statistics; they are constants for differentiation."""
    if mean.shape != (x.data.shape[-1],) or var.shape != mean.shape:
        raise ShapeError(f"statistics of dims {mean.shape} do not match {x.data.shape[-1]} channels")
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.data.dtype)
    out = ((x.data - mean.astype(x.data.dtype)) * inv_std).astype(x.data.dtype)
    return _emit(out, (x,), lambda g: (g * inv_std,))


def _as_batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data, False
    if x.data.ndim == 2:
        return x.data[None], True
    raise ShapeError(f"expected length x channels (optionally batched), got {x.dims}")


def _require_same_dims(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: dims {a.dims} and {b.dims} differ")
