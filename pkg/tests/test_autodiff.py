from typing import Callable

import numpy as np
import pytest

from apps.engine.autodiff import (
    GraphError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    add,
    affine,
    avg_pool_temporal,
    backward,
    batch_norm,
    conv_temporal,
    engine_dtype,
    init_uniform,
    lincomb,
    mul,
    normalize,
    precision,
    relu,
    reshape,
    scale,
    softmax_xent,
    sum_all,
)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights)))


def _numeric_grad(loss_fn: Callable[[], Tensor], param: Parameter, index: tuple, eps: float = 1e-6) -> float:
    original = param.data[index]
    param.data[index] = original + eps
    plus = float(loss_fn().data)
    param.data[index] = original - eps
    minus = float(loss_fn().data)
    param.data[index] = original
    return (plus - minus) / (2 * eps)


def _assert_gradients_match(loss_fn: Callable[[], Tensor], params: list[Parameter], coords: int = 20) -> None:
    with Tape() as tape:
        backward(tape, loss_fn())
    rng = np.random.default_rng(1)
    for param in params:
        for _ in range(coords):
            index = tuple(int(rng.integers(0, size)) for size in param.data.shape)
            expected = _numeric_grad(loss_fn, param, index)
            assert param.grad[index] == pytest.approx(expected, rel=1e-4, abs=1e-7), (param.name, index)


def test_tensors_default_to_32_bit_and_precision_switches() -> None:
    assert Tensor([1.0]).data.dtype == np.float32
    with precision(np.float64):
        assert engine_dtype() == np.float64
        assert Tensor([1.0]).data.dtype == np.float64
    assert engine_dtype() == np.float32
    with pytest.raises(ValueError, match="unsupported"):
        with precision(np.float16):
            pass


def test_elementwise_gradients() -> None:
    with precision(np.float64):
        rng = np.random.default_rng(0)
        a = Parameter("a", rng.standard_normal((3, 4)))
        b = Parameter("b", rng.standard_normal((3, 4)))
        weights = rng.standard_normal((3, 4))

        def loss() -> Tensor:
            mixed = lincomb(a, [(0.5, b), (0.0, a), (-1.5, mul(a, b))])
            return _weighted_sum(relu(add(scale(mixed, 2.0), b)), weights)

        _assert_gradients_match(loss, [a, b], coords=10)


@pytest.mark.parametrize(("kernel_len", "stride", "padding"), [(3, 1, 1), (3, 3, 1), (9, 1, 4), (1, 1, 0)])
def test_conv_temporal_gradients(kernel_len: int, stride: int, padding: int) -> None:
    with precision(np.float64):
        rng = np.random.default_rng(kernel_len + stride)
        x = Parameter("x", rng.standard_normal((2, 13, 3)))
        kernel = Parameter("kernel", rng.standard_normal((kernel_len, 3, 4)))
        out_len = (13 + 2 * padding - kernel_len) // stride + 1
        weights = rng.standard_normal((2, out_len, 4))

        _assert_gradients_match(lambda: _weighted_sum(conv_temporal(x, kernel, stride, padding), weights), [x, kernel])


def test_conv_temporal_matches_direct_sum() -> None:
    with precision(np.float64):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((7, 2))
        kernel = rng.standard_normal((3, 2, 5))

        out = conv_temporal(Tensor(x), Tensor(kernel), stride=2, padding=1).data

        padded = np.pad(x, ((1, 1), (0, 0)))
        expected = np.stack([sum(padded[2 * i + j] @ kernel[j] for j in range(3)) for i in range(4)])
        np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_pool_affine_and_softmax_gradients() -> None:
    with precision(np.float64):
        rng = np.random.default_rng(4)
        x = Parameter("x", rng.standard_normal((3, 8, 5)))
        weight = Parameter("weight", rng.standard_normal((5, 6)))
        labels = np.array([0, 5, 2])

        def loss() -> Tensor:
            pooled = avg_pool_temporal(avg_pool_temporal(x, 2, 2), 4, 4)
            return softmax_xent(affine(reshape(pooled, (3, 5)), weight), labels)

        _assert_gradients_match(loss, [x, weight])


def test_batch_norm_gradients_flow_through_statistics() -> None:
    with precision(np.float64):
        rng = np.random.default_rng(5)
        x = Parameter("x", rng.standard_normal((4, 6, 3)) * 2 + 1)
        weights = rng.standard_normal((4, 6, 3))

        _assert_gradients_match(lambda: _weighted_sum(batch_norm(x, 1e-5)[0], weights), [x])


def test_batch_norm_returns_biased_statistics() -> None:
    with precision(np.float64):
        data = np.random.default_rng(6).standard_normal((2, 5, 3))

        out, mean, var = batch_norm(Tensor(data), 1e-5)

        np.testing.assert_allclose(mean, data.reshape(-1, 3).mean(axis=0))
        np.testing.assert_allclose(var, data.reshape(-1, 3).var(axis=0))
        np.testing.assert_allclose(out.data.reshape(-1, 3).mean(axis=0), 0.0, atol=1e-12)


def test_normalize_treats_statistics_as_constants() -> None:
    with precision(np.float64):
        rng = np.random.default_rng(7)
        x = Parameter("x", rng.standard_normal((5, 3)))
        mean, var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
        weights = rng.standard_normal((5, 3))

        _assert_gradients_match(lambda: _weighted_sum(normalize(x, mean, var, 1e-5), weights), [x])


def test_softmax_xent_is_stable_for_large_logits() -> None:
    logits = Tensor([[1000.0, 0.0, -1000.0]])

    assert float(softmax_xent(logits, [0]).data) == pytest.approx(0.0, abs=1e-6)


def test_backward_rejects_non_scalar_and_foreign_losses() -> None:
    p = Parameter("p", np.ones(3))
    with Tape() as tape:
        out = scale(p, 2.0)
        with pytest.raises(GraphError, match="scalar"):
            backward(tape, out)
    with Tape() as other:
        with pytest.raises(GraphError, match="not produced"):
            backward(other, sum_all(Tensor(np.ones(3))))


def test_backward_clears_tape_and_accumulates_grads() -> None:
    p = Parameter("p", np.ones(2))
    for _ in range(2):
        with Tape() as tape:
            backward(tape, sum_all(scale(p, 3.0)))
        assert len(tape) == 0

    np.testing.assert_allclose(p.grad, [6.0, 6.0])
    p.zero_grad()
    assert not p.grad.any()


def test_tape_rewind_drops_later_records() -> None:
    p = Parameter("p", np.ones(2))
    with Tape() as tape:
        scale(p, 2.0)
        mark = tape.mark()
        scale(p, 3.0)
        relu(p)
        tape.rewind(mark)
        assert len(tape) == 1


def test_operations_outside_a_tape_are_not_recorded() -> None:
    out = scale(Parameter("p", np.ones(2)), 2.0)

    assert not out.requires_grad


def test_shape_errors() -> None:
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError, match="channels"):
        conv_temporal(Tensor(np.ones((5, 2))), Tensor(np.ones((3, 4, 1))))
    with pytest.raises(ShapeError, match="reshape"):
        reshape(Tensor(np.ones(6)), (4, 2))


def test_init_uniform_respects_fan_in_bound() -> None:
    param = init_uniform("w", (9, 20, 20), 180, np.random.default_rng(0))

    assert param.name == "w"
    assert np.abs(param.data).max() <= np.float32(np.sqrt(6.0 / 180))
    np.testing.assert_array_equal(param.data, init_uniform("w", (9, 20, 20), 180, np.random.default_rng(0)).data)


def _relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    return float(np.linalg.norm(actual - expected) / np.linalg.norm(expected))


def test_conv_temporal_worked_example() -> None:
    out = conv_temporal(Tensor([[1.0], [2.0], [3.0]]), Tensor(np.array([1.0, 0.0, -1.0]).reshape(3, 1, 1)), padding=1)

    np.testing.assert_array_equal(out.data[:, 0], [-2.0, -2.0, 2.0])


def test_conv_temporal_and_affine_are_linear_in_each_operand() -> None:
    rng = np.random.default_rng(8)
    x1, x2 = rng.standard_normal((2, 2, 25, 20))
    k1, k2 = rng.standard_normal((2, 9, 20, 20))
    v1, v2 = rng.standard_normal((2, 4, 20))
    w1, w2 = rng.standard_normal((2, 20, 12))
    alpha = 2.5

    def conv(x: np.ndarray, k: np.ndarray) -> np.ndarray:
        return conv_temporal(Tensor(x), Tensor(k), stride=1, padding=4).data

    def dense(v: np.ndarray, w: np.ndarray) -> np.ndarray:
        return affine(Tensor(v), Tensor(w)).data

    for op, (a1, a2), (b1, b2) in ((conv, (x1, x2), (k1, k2)), (dense, (v1, v2), (w1, w2))):
        assert _relative_error(op(a1 + a2, b1), op(a1, b1) + op(a2, b1)) < 1e-6
        assert _relative_error(op(a1, b1 + b2), op(a1, b1) + op(a1, b2)) < 1e-6
        assert _relative_error(op(alpha * a1, b1), alpha * op(a1, b1)) < 1e-6
        assert _relative_error(op(a1, alpha * b1), alpha * op(a1, b1)) < 1e-6


def test_output_dims_follow_the_shape_algebra() -> None:
    rng = np.random.default_rng(9)
    for _ in range(40):
        batch, length, c_in, c_out = (int(v) for v in rng.integers(1, 6, 4))
        length += 8
        m, stride = int(rng.integers(1, 8)), int(rng.integers(1, 4))
        padding = int(rng.integers(0, 4))
        window = int(rng.integers(1, length + 1))

        conv = conv_temporal(Tensor(np.ones((batch, length, c_in))), Tensor(np.ones((m, c_in, c_out))), stride, padding)
        pooled = avg_pool_temporal(Tensor(np.ones((batch, length, c_in))), window, stride)
        dense = affine(Tensor(np.ones((batch, c_in))), Tensor(np.ones((c_in, c_out))))

        assert conv.dims == (batch, (length + 2 * padding - m) // stride + 1, c_out)
        assert pooled.dims == (batch, (length - window) // stride + 1, c_in)
        assert dense.dims == (batch, c_out)
