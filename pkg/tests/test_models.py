import numpy as np
import pytest
from pydantic import ValidationError

from apps.engine.autodiff import Tape, Tensor, backward, precision, softmax_xent
from apps.engine.models import (
    N_CLASSES,
    ModelSpec,
    build_model,
    cost_report,
    dynamics_tcnn,
    dynamics_tdnn,
    model_spec,
)


def _features(batch: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((batch, 101, 40))


@pytest.mark.parametrize(
    ("variant", "params", "fixed", "per_eval"),
    [
        ("ode-tcnn20", 10_240, 242_640, 190_000),
        ("ode-tdnn32", 7_296, 130_944, 104_448),
        ("ode-tcnn30", 21_060, 363_960, 427_500),
        ("ode-tdnn29", 6_351, 118_668, 85_782),
    ],
)
def test_cost_model_totals(variant: str, params: int, fixed: int, per_eval: int) -> None:
    report = build_model(model_spec(variant), seed=0).cost()

    assert report.total_params == params
    assert report.mults_fixed == fixed
    assert report.mults_per_eval == per_eval
    assert report.total_params == sum(row.params for row in report.rows)


def test_tcnn20_layer_rows_and_total_at_nfe_20() -> None:
    report = cost_report(model_spec("ode-tcnn20"))

    assert [row.params for row in report.rows] == [2400, 0, 3600, 3600, 400, 0, 240]
    assert [row.mults for row in report.rows if row.params] == [242_400, 90_000, 90_000, 10_000, 240]
    assert report.total_mults(20) == 4_042_640


def test_tdnn32_stem_multiplies() -> None:
    rows = {row.name: row for row in cost_report(model_spec("ode-tdnn32")).rows}

    assert rows["stem.tdnn_sub"].length == 34
    assert rows["stem.tdnn_sub"].mults == 130_560
    assert rows["head.fc"].mults == 384


def test_model_spec_presets_and_validation() -> None:
    tdnn = model_spec("ode-tdnn29")

    assert (tdnn.depth_T, tdnn.infer_tolerance, tdnn.train_tolerance) == (3.0, 5e-3, 1e-3)
    assert model_spec("ode-tcnn30").infer_tolerance == 0.5
    assert tdnn.family == "tdnn"
    with pytest.raises(ValueError, match="unknown model variant"):
        model_spec("ode-rnn")
    with pytest.raises(ValidationError, match="depth_T"):
        ModelSpec(variant="ode-tcnn20", channels_or_dim=20, depth_T=3.0, infer_tolerance=0.5)


def test_build_model_is_seeded() -> None:
    spec = model_spec("ode-tdnn32")
    first, second, other = build_model(spec, 1), build_model(spec, 1), build_model(spec, 2)

    assert [p.name for p in first.parameters()] == ["head.fc.weight", "ode.tdnn.kernel", "stem.tdnn_sub.kernel"]
    for a, b, c in zip(first.parameters(), second.parameters(), other.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)


def test_dynamics_preserve_state_shapes() -> None:
    tcnn = build_model(model_spec("ode-tcnn20"), 0)
    tdnn = build_model(model_spec("ode-tdnn29"), 0)
    rng = np.random.default_rng(0)

    assert dynamics_tcnn(tcnn, Tensor(rng.standard_normal((2, 25, 20))), 0.3, "train").dims == (2, 25, 20)
    assert dynamics_tdnn(tdnn, Tensor(rng.standard_normal((2, 34, 29))), 0.3, "train").dims == (2, 34, 29)


def test_zero_ode_weights_give_zero_dynamics() -> None:
    model = build_model(model_spec("ode-tcnn20"), 0)
    for name in ("ode.conv1.kernel", "ode.conv2.kernel", "ode.conv3.kernel"):
        model.params[name].data[:] = 0.0

    out = model.dynamics(Tensor(np.random.default_rng(1).standard_normal((3, 25, 20))), 0.5, "train")

    assert not out.data.any()


def test_forward_returns_logits_and_counts_evaluations() -> None:
    model = build_model(model_spec("ode-tdnn32"), 0)
    calls = []
    inner = model.dynamics

    def counting(h, t, mode):
        calls.append(t)
        return inner(h, t, mode)

    model.dynamics = counting
    result = model.forward(_features(3), mode="train")

    assert result.logits.dims == (3, N_CLASSES)
    assert result.nfe == [len(calls)] * 3

    calls.clear()
    single = model.forward(_features(1), mode="infer")
    assert single.nfe == [len(calls)]


def test_training_forward_fills_the_database() -> None:
    model = build_model(model_spec("ode-tcnn20"), 0)

    result = model.forward(_features(2), mode="train")

    assert model.database.keys("stem.norm") == [0.0]
    assert sorted(model.database.layer_ids()) == ["ode.norm1", "ode.norm2", "ode.norm3", "stem.norm"]
    visited = sorted({round(t, 6) for t in result.solves[0].visited_times})
    assert model.database.keys("ode.norm1") == visited


def test_inference_logits_do_not_depend_on_batch_composition() -> None:
    model = build_model(model_spec("ode-tcnn20"), 3)
    model.forward(_features(4, seed=1), mode="train")
    features = _features(5, seed=2)

    together = model.forward(features, mode="infer").logits.data
    alone = np.concatenate([model.forward(features[i : i + 1], mode="infer").logits.data for i in range(5)])
    shuffled = model.forward(features[::-1], mode="infer").logits.data[::-1]

    np.testing.assert_array_equal(together, alone)
    np.testing.assert_array_equal(together, shuffled)


def test_forward_rejects_wrong_feature_geometry() -> None:
    with pytest.raises(ValueError, match="101 x 40"):
        build_model(model_spec("ode-tdnn32"), 0).forward(np.zeros((1, 100, 40)))


@pytest.mark.parametrize("variant", ["ode-tdnn32", "ode-tcnn20"])
def test_model_gradients_match_finite_differences(variant: str) -> None:
    with precision(np.float64):
        model = build_model(model_spec(variant), 4)
        features = _features(2, seed=5)
        labels = np.array([1, 7])

        def loss() -> Tensor:
            return softmax_xent(model.forward(features, mode="train", fixed_steps=2).logits, labels)

        with Tape() as tape:
            backward(tape, loss())

        rng = np.random.default_rng(6)
        for param in model.parameters():
            for _ in range(20):
                index = tuple(int(rng.integers(0, size)) for size in param.data.shape)
                original = param.data[index]
                param.data[index] = original + 1e-6
                plus = float(loss().data)
                param.data[index] = original - 1e-6
                minus = float(loss().data)
                param.data[index] = original
                expected = (plus - minus) / 2e-6
                assert param.grad[index] == pytest.approx(expected, rel=1e-4, abs=1e-7), (param.name, index)


@pytest.mark.parametrize("variant", ["ode-tcnn20", "ode-tdnn32"])
def test_relaxed_tolerance_never_raises_model_nfe(variant: str) -> None:
    for seed in range(2):
        model = build_model(model_spec(variant), seed)
        model.forward(_features(4, seed=seed), mode="train")
        features = _features(3, seed=seed + 10)

        mean_nfe = [
            float(np.mean(model.forward(features, mode="infer", tolerance=tolerance).nfe))
            for tolerance in (1e-3, 1e-2, 1e-1, 0.5)
        ]

        assert mean_nfe == sorted(mean_nfe, reverse=True), (variant, seed, mean_nfe)
        assert mean_nfe[-1] < mean_nfe[0]
