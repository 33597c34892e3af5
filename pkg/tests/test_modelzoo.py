import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dattr import modelzoo as mz
from dattr.numcore import ContractError

from conftest import rel_err


def test_param_count_and_layout():
    spec = mz.MLPSpec((8, 64, 64, 1))
    assert mz.n_params(spec) == 8 * 64 + 64 + 64 * 64 + 64 + 64 + 1 == 4801
    names = [n for n, _ in mz.param_slices(spec)]
    assert names == ["W0", "b0", "W1", "b1", "W2", "b2"]
    assert mz.param_slices(spec)[-1][1].stop == 4801
    assert mz.n_params(mz.GLMSpec(3)) == 4


def test_spec_validation():
    with pytest.raises(ContractError):
        mz.MLPSpec((3, 1))
    with pytest.raises(ContractError):
        mz.MLPSpec((3, 4, 1), "relu")
    with pytest.raises(ContractError):
        mz.GLMSpec(2, "cross-entropy")


def test_spec_roundtrip_and_hash():
    for spec in (mz.MLPSpec((3, 4, 2), "gelu", "cross-entropy"), mz.GLMSpec(5)):
        again = mz.spec_from_dict(spec.to_dict())
        assert again == spec and mz.spec_hash(again) == mz.spec_hash(spec)
    assert mz.spec_hash(mz.GLMSpec(5)) != mz.spec_hash(mz.GLMSpec(4))


def test_init_is_deterministic_with_zero_biases():
    spec = mz.MLPSpec((3, 4, 1))
    a, b = mz.init_params(spec, 7), mz.init_params(spec, 7)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, mz.init_params(spec, 8))
    for name, sl in mz.param_slices(spec):
        if name.startswith("b"):
            assert not a[sl].any()


def test_glm_is_affine():
    spec = mz.GLMSpec(2)
    theta = np.array([2.0, -1.0, 0.5])
    assert mz.forward(spec, theta, np.array([1.0, 3.0]))[0] == pytest.approx(2 - 3 + 0.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["half-mse", "cross-entropy"]))
def test_forward_routes_agree(seed, loss_kind):
    rng = np.random.default_rng(seed)
    spec = mz.MLPSpec((2, 5, 3), "gelu", loss_kind)
    theta = rng.normal(size=mz.n_params(spec))
    X = rng.normal(size=(4, 2))
    np.testing.assert_allclose(mz.forward(spec, theta, X), np.asarray(mz.jax_forward(spec, theta, X)), atol=1e-12)


def test_gelu_is_exact_erf_form():
    spec = mz.MLPSpec((1, 1, 1))
    theta = np.array([1.0, 0.0, 1.0, 0.0])   # W0, b0, W1, b1
    from math import erf, sqrt
    for x in (-2.0, -0.3, 0.0, 1.7):
        assert mz.forward(spec, theta, np.array([x]))[0] == pytest.approx(0.5 * x * (1 + erf(x / sqrt(2))), abs=1e-15)


def test_cross_entropy_loss_value():
    spec = mz.MLPSpec((1, 1, 3), "gelu", "cross-entropy")
    theta = np.zeros(mz.n_params(spec))
    assert mz.per_example_loss(spec, theta, (np.array([0.5]), 2)) == pytest.approx(np.log(3))
    with pytest.raises(ContractError):
        mz.encode_targets(spec, [3])


@pytest.mark.parametrize("kind", ["model-output-at-query", "loss-at-query"])
def test_measurement_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(2)
    spec = mz.MLPSpec((3, 6, 1))
    theta = rng.normal(size=mz.n_params(spec))
    m = mz.MeasurementSpec(kind, (0.3, -1.0, 0.7), 0.4 if kind == "loss-at-query" else None)
    g = mz.measurement_grad(m, spec, theta)
    v = rng.normal(size=theta.size)
    h = 1e-5
    fd = (mz.measurement(m, spec, theta + h * v) - mz.measurement(m, spec, theta - h * v)) / (2 * h)
    assert rel_err(g @ v, fd) < 1e-7
    assert mz.measurement(m, spec, theta) == pytest.approx(float(mz.measurement_fn(m, spec)(theta)), abs=1e-13)


def test_measurement_contracts():
    spec = mz.MLPSpec((3, 4, 1))
    with pytest.raises(ContractError):
        mz.MeasurementSpec("loss-at-query", (0.0, 0.0, 0.0))
    with pytest.raises(ContractError):
        mz.measurement(mz.MeasurementSpec("model-output-at-query", (0.0, 0.0)), spec, np.zeros(mz.n_params(spec)))
    with pytest.raises(ContractError):
        mz.forward(spec, np.zeros(3), np.zeros(3))
