"""Model definitions, per-example losses and measurement functions.

Two evaluation routes exist for every model: the hand-derived kernels in
:mod:`dattr.kernels` (used on hot paths) and JAX-traceable functions (used with
:mod:`dattr.numcore` for gradients of measurements and as a test oracle).
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence, Union

import jax
import jax.numpy as jnp
import numpy as np

from dattr import kernels, numcore
from dattr.numcore import ContractError

LOSS_CODES = {"half-mse": 0, "cross-entropy": 1}


@dataclass(frozen=True)
class MLPSpec:
    layer_dims: tuple[int, ...]
    activation: str = "gelu"
    loss_kind: str = "half-mse"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 3:
            raise ContractError("an MLP needs input, at least one hidden layer, and output")
        if min(dims) < 1:
            raise ContractError(f"layer dims must be >= 1, got {dims}")
        if self.activation != "gelu":
            raise ContractError(f"unsupported activation {self.activation!r}")
        if self.loss_kind not in LOSS_CODES:
            raise ContractError(f"unknown loss kind {self.loss_kind!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.layer_dims

    def to_dict(self) -> dict:
        return {"model": "mlp", "layer_dims": list(self.layer_dims),
                "activation": self.activation, "loss_kind": self.loss_kind}


@dataclass(frozen=True)
class GLMSpec:
    """Linear model ``w.x + b`` with a scalar output."""

    input_dim: int
    loss_kind: str = "half-mse"

    def __post_init__(self):
        if int(self.input_dim) < 1:
            raise ContractError("GLM input_dim must be >= 1")
        if self.loss_kind != "half-mse":
            raise ContractError("GLMs support only the half-mse loss")

    @property
    def dims(self) -> tuple[int, ...]:
        return (int(self.input_dim), 1)

    def to_dict(self) -> dict:
        return {"model": "glm", "input_dim": int(self.input_dim), "loss_kind": self.loss_kind}


ModelSpec = Union[MLPSpec, GLMSpec]


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    kind = d.pop("model")
    if kind == "mlp":
        return MLPSpec(tuple(d["layer_dims"]), d.get("activation", "gelu"),
                       d.get("loss_kind", "half-mse"))
    if kind == "glm":
        return GLMSpec(int(d["input_dim"]), d.get("loss_kind", "half-mse"))
    raise ContractError(f"unknown model kind {kind!r}")


def spec_hash(spec: ModelSpec) -> str:
    return hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()


def n_params(spec: ModelSpec) -> int:
    d = spec.dims
    return sum((a + 1) * b for a, b in zip(d[:-1], d[1:]))


def loss_code(spec: ModelSpec) -> int:
    return LOSS_CODES[spec.loss_kind]


@functools.lru_cache(maxsize=None)
def dims_array(spec: ModelSpec) -> np.ndarray:
    arr = np.asarray(spec.dims, dtype=np.int64)
    arr.setflags(write=False)
    return arr


def param_slices(spec: ModelSpec) -> list[tuple[str, slice]]:
    """Named slices of the flat layout: ``W0, b0, W1, b1, ...``."""
    out = []
    off = 0
    d = spec.dims
    for l, (a, b) in enumerate(zip(d[:-1], d[1:])):
        out.append((f"W{l}", slice(off, off + a * b)))
        off += a * b
        out.append((f"b{l}", slice(off, off + b)))
        off += b
    return out


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0])))
    theta = np.zeros(n_params(spec))
    d = spec.dims
    for (name, sl), (fan_in, fan_out) in zip(param_slices(spec)[::2], zip(d[:-1], d[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        theta[sl] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return theta


def _check_theta(spec: ModelSpec, theta) -> np.ndarray:
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    if theta.shape != (n_params(spec),):
        raise ContractError(f"expected {n_params(spec)} parameters, got shape {theta.shape}")
    return theta


def _check_features(spec: ModelSpec, x) -> np.ndarray:
    X = np.atleast_2d(np.ascontiguousarray(x, dtype=np.float64))
    if X.shape[1] != spec.dims[0]:
        raise ContractError(f"input dimension {X.shape[1]} does not match model input {spec.dims[0]}")
    return X


def encode_targets(spec: ModelSpec, y) -> np.ndarray:
    """Targets as the float matrix the kernels consume (one-hot for cross-entropy)."""
    out_dim = spec.dims[-1]
    if spec.loss_kind == "cross-entropy":
        labels = np.atleast_1d(np.asarray(y))
        if labels.ndim != 1:
            raise ContractError("cross-entropy targets must be a label vector")
        if np.any(labels != np.round(labels)) or np.any(labels < 0) or np.any(labels >= out_dim):
            raise ContractError(f"labels must be integers in [0, {out_dim})")
        Y = np.zeros((labels.shape[0], out_dim))
        Y[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
        return Y
    Y = np.asarray(y, dtype=np.float64)
    if Y.ndim <= 1 and out_dim == 1:
        Y = Y.reshape(-1, 1)
    Y = np.atleast_2d(Y)
    if Y.shape[1] != out_dim:
        raise ContractError(f"target dimension {Y.shape[1]} does not match output {out_dim}")
    return np.ascontiguousarray(Y)


def forward(spec: ModelSpec, theta, x) -> np.ndarray:
    """Output for a feature vector (1-D result) or a feature matrix (2-D result)."""
    theta = _check_theta(spec, theta)
    single = np.ndim(x) == 1
    out = kernels.forward(dims_array(spec), theta, _check_features(spec, x))
    return out[0] if single else out


def per_example_loss(spec: ModelSpec, theta, z) -> float:
    x, y = z
    theta = _check_theta(spec, theta)
    X = _check_features(spec, x)
    Y = encode_targets(spec, [y] if spec.loss_kind == "cross-entropy" else y)
    idx = np.zeros(1, dtype=np.int64)
    return float(kernels.per_example_losses(dims_array(spec), loss_code(spec), theta, X, Y, idx)[0])


# JAX-traceable route --------------------------------------------------------


def jax_forward(spec: ModelSpec, theta, X):
    d = spec.dims
    h = X
    off = 0
    n_layers = len(d) - 1
    for l, (a, b) in enumerate(zip(d[:-1], d[1:])):
        W = theta[off:off + a * b].reshape(b, a)
        off += a * b
        bias = theta[off:off + b]
        off += b
        h = h @ W.T + bias
        if l < n_layers - 1:
            h = jax.nn.gelu(h, approximate=False)
    return h


def jax_losses(spec: ModelSpec, theta, X, Y):
    """Per-example losses; ``Y`` is the encoded target matrix."""
    F = jax_forward(spec, theta, X)
    if spec.loss_kind == "half-mse":
        return 0.5 * jnp.sum((F - Y) ** 2, axis=1)
    return jax.nn.logsumexp(F, axis=1) * jnp.sum(Y, axis=1) - jnp.sum(Y * F, axis=1)


def make_batch_loss(spec: ModelSpec, X, Y, coef=None):
    """Scalar field ``theta -> sum_n coef_n * l_n(theta)`` (mean when ``coef`` is None)."""
    X = jnp.asarray(X)
    Y = jnp.asarray(Y)
    c = jnp.full(X.shape[0], 1.0 / X.shape[0]) if coef is None else jnp.asarray(coef)

    def loss(theta):
        return jnp.dot(c, jax_losses(spec, theta, X, Y))

    return loss


@functools.lru_cache(maxsize=32)
def jax_loss_ops(spec: ModelSpec):
    """Jitted ``(value, grad, hvp_batch)`` of ``theta -> sum_n c_n l_n`` with data as arguments.

    ``hvp_batch(theta, X, Y, c, V)`` returns the rows ``H @ V[k]``.
    """
    def f(theta, X, Y, c):
        return jnp.dot(c, jax_losses(spec, theta, X, Y))

    g = jax.grad(f)

    def one(theta, X, Y, c, v):
        return jax.jvp(lambda th: g(th, X, Y, c), (theta,), (v,))[1]

    hv = jax.vmap(one, in_axes=(None, None, None, None, 0))
    return jax.jit(f), jax.jit(g), jax.jit(hv)


# Measurements ---------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementSpec:
    kind: str
    query: tuple[float, ...]
    target: float | int | tuple[float, ...] | None = None
    output_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "query", tuple(float(q) for q in self.query))
        if self.kind not in ("model-output-at-query", "loss-at-query"):
            raise ContractError(f"unknown measurement kind {self.kind!r}")
        if self.kind == "loss-at-query" and self.target is None:
            raise ContractError("loss-at-query needs a target")
        if isinstance(self.target, list):
            object.__setattr__(self, "target", tuple(self.target))


def _check_measurement(mspec: MeasurementSpec, spec: ModelSpec):
    if len(mspec.query) != spec.dims[0]:
        raise ContractError(f"query dimension {len(mspec.query)} does not match model input {spec.dims[0]}")
    if not 0 <= mspec.output_index < spec.dims[-1]:
        raise ContractError(f"output_index {mspec.output_index} out of range")


@functools.lru_cache(maxsize=64)
def _measurement_kernel(spec: ModelSpec, kind: str, out_index: int):
    def m(theta, x, y):
        if kind == "model-output-at-query":
            return jax_forward(spec, theta, x[None, :])[0, out_index]
        return jax_losses(spec, theta, x[None, :], y[None, :])[0]

    return jax.jit(m), jax.jit(jax.grad(m))


def _measurement_args(mspec: MeasurementSpec, spec: ModelSpec):
    x = jnp.asarray(mspec.query)
    if mspec.kind == "loss-at-query":
        tgt = mspec.target
        y = encode_targets(spec, [tgt] if spec.loss_kind == "cross-entropy" else np.atleast_1d(tgt))[0]
    else:
        y = np.zeros(spec.dims[-1])
    return x, jnp.asarray(y)


def measurement_fn(mspec: MeasurementSpec, spec: ModelSpec):
    """JAX-traceable ``theta -> m(theta)``."""
    _check_measurement(mspec, spec)
    m, _ = _measurement_kernel(spec, mspec.kind, mspec.output_index)
    x, y = _measurement_args(mspec, spec)
    return lambda theta: m(theta, x, y)


def measurement(mspec: MeasurementSpec, spec: ModelSpec, theta) -> float:
    _check_measurement(mspec, spec)
    theta = _check_theta(spec, theta)
    if mspec.kind == "model-output-at-query":
        return float(forward(spec, theta, np.asarray(mspec.query))[mspec.output_index])
    return per_example_loss(spec, theta, (np.asarray(mspec.query), mspec.target))


def measurement_grad(mspec: MeasurementSpec, spec: ModelSpec, theta) -> np.ndarray:
    _check_measurement(mspec, spec)
    theta = numcore.as_param_vec(_check_theta(spec, theta))
    _, g = _measurement_kernel(spec, mspec.kind, mspec.output_index)
    x, y = _measurement_args(mspec, spec)
    out = np.asarray(g(jnp.asarray(theta), x, y))
    if not np.all(np.isfinite(out)):
        raise numcore.NumericFailure("measurement_grad")
    return out


def measurement_specs(spec: ModelSpec, queries: Sequence, kind: str = "model-output-at-query",
                      targets: Sequence | None = None, output_index: int = 0) -> list[MeasurementSpec]:
    out = []
    for i, q in enumerate(np.atleast_2d(queries)):
        tgt = None if targets is None else targets[i]
        out.append(MeasurementSpec(kind, tuple(q), tgt, output_index))
    return out
