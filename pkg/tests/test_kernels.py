"""Cross-checks of the compiled and NumPy kernels against each other and against JAX."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dattr import kernels, modelzoo as mz

BACKENDS = kernels.available_backends()


def instance(seed, loss_kind="half-mse", dims=(3, 6, 5, 2), n=9):
    rng = np.random.default_rng(seed)
    spec = mz.MLPSpec(dims, "gelu", loss_kind)
    theta = rng.normal(scale=0.7, size=mz.n_params(spec))
    X = rng.normal(size=(n, dims[0]))
    if loss_kind == "cross-entropy":
        Y = mz.encode_targets(spec, rng.integers(0, dims[-1], size=n))
    else:
        Y = rng.normal(size=(n, dims[-1]))
    idx = rng.choice(n, 6, replace=True).astype(np.int64)
    coef = rng.uniform(0.1, 1.0, size=6)
    return spec, theta, X, Y, idx, coef


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("loss_kind", ["half-mse", "cross-entropy"])
@pytest.mark.parametrize("seed", range(4))
def test_kernels_agree_with_jax(backend, loss_kind, seed):
    K = kernels.load_backend(backend)
    spec, theta, X, Y, idx, coef = instance(seed, loss_kind)
    dims, code = mz.dims_array(spec), mz.loss_code(spec)
    f, g, hv = mz.jax_loss_ops(spec)
    Xb, Yb = X[idx], Y[idx]
    np.testing.assert_allclose(K.forward(dims, theta, X), np.asarray(mz.jax_forward(spec, theta, X)), atol=1e-12)
    gout = np.empty_like(theta)
    value = K.loss_grad(dims, code, theta, X, Y, idx, coef, gout)
    assert abs(value - float(f(theta, Xb, Yb, coef))) < 1e-12
    np.testing.assert_allclose(gout, np.asarray(g(theta, Xb, Yb, coef)), atol=1e-12)
    losses = K.per_example_losses(dims, code, theta, X, Y, idx)
    np.testing.assert_allclose(losses, np.asarray(mz.jax_losses(spec, theta, Xb, Yb)), atol=1e-12)
    G = np.empty((idx.size, theta.size))
    K.per_example_grads(dims, code, theta, X, Y, idx, G)
    for b in range(idx.size):
        np.testing.assert_allclose(G[b], np.asarray(g(theta, Xb[b:b + 1], Yb[b:b + 1], np.ones(1))), atol=1e-12)
    V = np.random.default_rng(seed + 100).normal(size=(3, theta.size))
    H = np.empty_like(V)
    K.hvp(dims, code, theta, X, Y, idx, coef, V, H)
    np.testing.assert_allclose(H, np.asarray(hv(theta, Xb, Yb, coef, V)), atol=1e-11)


@pytest.mark.skipif("c" not in BACKENDS, reason="compiled extension not built")
@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.95), st.sampled_from([0.0, 0.05, 10.0]))
def test_backends_train_identically(seed, momentum, clip):
    C, P = kernels.load_backend("c"), kernels.load_backend("python")
    spec, theta, X, Y, _, _ = instance(seed, dims=(3, 4, 1), n=10)
    dims = mz.dims_array(spec)
    rng = np.random.default_rng(seed)
    sched = np.stack([rng.choice(10, 4, replace=False) for _ in range(15)]).astype(np.int64)
    w = rng.uniform(0, 1, 10)
    lrs = np.full(15, 0.05)
    out = []
    for K in (C, P):
        th, v = theta.copy(), np.zeros_like(theta)
        status = K.train_loop(dims, 0, th, v, X, Y, sched, w, lrs, 1e-3, momentum, clip)
        out.append((status, th, v))
    assert out[0][0] == out[1][0] == -1
    np.testing.assert_allclose(out[0][1], out[1][1], rtol=0, atol=1e-12)
    np.testing.assert_allclose(out[0][2], out[1][2], rtol=0, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_sgd_update_clip_report(backend):
    K = kernels.load_backend(backend)
    th = np.array([1.0, 0.0])
    v = np.zeros(2)
    g = np.array([3.0, 4.0])
    norm, scale = K.sgd_update(th, v, g, 0.1, 0.0, 1.0)
    assert norm == 5.0 and scale == pytest.approx(0.2)
    np.testing.assert_allclose(v, [0.6, 0.8])
    np.testing.assert_allclose(th, [0.94, -0.08])


@pytest.mark.parametrize("backend", BACKENDS)
def test_train_loop_reports_divergence(backend):
    K = kernels.load_backend(backend)
    spec, theta, X, Y, _, _ = instance(0, dims=(3, 4, 1), n=10)
    Y = Y * 1e3
    sched = np.tile(np.arange(10, dtype=np.int64), (200, 1))
    status = K.train_loop(mz.dims_array(spec), 0, theta, np.zeros_like(theta), X, Y, sched,
                          np.ones(10), np.full(200, 50.0), 0.0, 0.9, 0.0)
    assert 0 <= status < 200


def test_selected_backend_is_reported():
    assert kernels.BACKEND in ("c", "python")
    assert "python" in BACKENDS
