"""Flat-parameter calculus and dense symmetric linear algebra.

Derivatives of arbitrary scalar/vector fields come from JAX (reverse mode for
gradients, forward mode for directional derivatives, forward-over-reverse for
Hessian-vector products). Everything runs in float64.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

jax.config.update("jax_enable_x64", True)

DEFAULT_HESSIAN_CAP = 8192


class NumericFailure(FloatingPointError):
    """A non-finite value appeared while evaluating ``operation``."""

    def __init__(self, operation: str, detail: str = ""):
        self.operation = operation
        msg = f"non-finite value in {operation}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class ContractError(ValueError):
    """Inputs violate an operation's preconditions."""


class CapacityError(RuntimeError):
    """Dense Hessian requested above the configured parameter cap."""


class DegenerateSpectrum(ArithmeticError):
    """Thresholding dropped every eigenvalue."""


def as_param_vec(theta) -> np.ndarray:
    arr = np.ascontiguousarray(theta, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"parameter vector must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericFailure("as_param_vec", "parameter vector has non-finite entries")
    return arr


def _check_finite(name: str, value) -> np.ndarray:
    out = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericFailure(name)
    return out


@functools.lru_cache(maxsize=256)
def _jit_grad(f):
    return jax.jit(jax.grad(f))


@functools.lru_cache(maxsize=256)
def _jit_jvp(F):
    return jax.jit(lambda th, v: jax.jvp(F, (th,), (v,))[1])


@functools.lru_cache(maxsize=256)
def _jit_hvp(loss):
    g = jax.grad(loss)
    return jax.jit(lambda th, v: jax.jvp(g, (th,), (v,))[1])


@functools.lru_cache(maxsize=256)
def _jit_hvp_batch(loss):
    g = jax.grad(loss)

    def one(th, v):
        return jax.jvp(g, (th,), (v,))[1]

    return jax.jit(jax.vmap(one, in_axes=(None, 0)))


def grad(f: Callable, theta) -> np.ndarray:
    """Reverse-mode gradient of the scalar field ``f`` at ``theta``."""
    theta = as_param_vec(theta)
    return _check_finite("grad", _jit_grad(f)(jnp.asarray(theta)))


def jvp(F: Callable, theta, v) -> np.ndarray:
    """Directional derivative ``dF(theta)[v]`` in forward mode."""
    theta = as_param_vec(theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ContractError(f"tangent shape {v.shape} does not match parameters {theta.shape}")
    return _check_finite("jvp", _jit_jvp(F)(jnp.asarray(theta), jnp.asarray(v)))


def hvp(loss: Callable, theta, v) -> np.ndarray:
    """Hessian-vector product, forward-over-reverse."""
    theta = as_param_vec(theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ContractError(f"vector shape {v.shape} does not match parameters {theta.shape}")
    return _check_finite("hvp", _jit_hvp(loss)(jnp.asarray(theta), jnp.asarray(v)))


@dataclass(frozen=True)
class HessianMatrix:
    """Symmetrized Hessian; ``asymmetry`` is max|H - H^T| / max|H| before symmetrizing."""

    entries: np.ndarray
    asymmetry: float = 0.0

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class SpectralDecomp:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        Q = self.eigenvectors
        return (Q * self.eigenvalues) @ Q.T


def dense_hessian(loss: Callable | None, theta, *, hvp_batch: Callable | None = None,
                  cap: int = DEFAULT_HESSIAN_CAP, chunk: int = 128) -> HessianMatrix:
    """Assemble the Hessian column by column from Hessian-vector products.

    ``hvp_batch(V)`` may be supplied to compute ``H @ V[k]`` for each row of a
    ``(k, d)`` block of basis vectors; otherwise JAX is used on ``loss``.
    Columns land in fixed positions, so chunking never changes the result.
    """
    theta = as_param_vec(theta)
    d = theta.shape[0]
    if d > cap:
        raise CapacityError(
            f"dense Hessian needs d_param <= {cap} (got {d}); use block-diagonal mode "
            "or raise the cap")
    if hvp_batch is None:
        if loss is None:
            raise ContractError("dense_hessian needs a loss or an hvp_batch callable")
        fn = _jit_hvp_batch(loss)
        th = jnp.asarray(theta)

        def hvp_batch(V):
            return np.asarray(fn(th, jnp.asarray(V)))

    H = np.empty((d, d))
    for start in range(0, d, chunk):
        stop = min(d, start + chunk)
        basis = np.zeros((stop - start, d))
        basis[np.arange(stop - start), np.arange(start, stop)] = 1.0
        # row k of hvp_batch(basis) is column start+k of H
        H[:, start:stop] = np.asarray(hvp_batch(basis)).T
    _check_finite("dense_hessian", H)
    scale = float(np.max(np.abs(H))) if H.size else 0.0
    asym = float(np.max(np.abs(H - H.T))) / scale if scale > 0 else 0.0
    return HessianMatrix(0.5 * (H + H.T), asym)


def eig_decompose(H) -> SpectralDecomp:
    """Symmetric eigendecomposition, eigenvalues ascending."""
    entries = H.entries if isinstance(H, HessianMatrix) else np.asarray(H, dtype=np.float64)
    entries = 0.5 * (entries + entries.T)
    w, Q = np.linalg.eigh(entries)
    return SpectralDecomp(w, Q)


def _kept(decomp: SpectralDecomp, rel_tol: float, damping: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < rel_tol < 1.0:
        raise ContractError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    if not np.isfinite(damping):
        raise ContractError("damping must be finite")
    shifted = decomp.eigenvalues + damping
    mags = np.abs(shifted)
    top = mags.max() if mags.size else 0.0
    keep = mags >= rel_tol * top if top > 0 else np.zeros(mags.shape, dtype=bool)
    return shifted, keep


def pinv_apply(decomp: SpectralDecomp, rel_tol: float, damping: float, v) -> np.ndarray:
    """Apply the thresholded pseudo-inverse of ``H + damping*I``.

    Shifted eigenvalues below ``rel_tol`` times the largest shifted magnitude are
    dropped. ``v`` may be a vector or a ``(d, k)`` matrix of column vectors.
    """
    shifted, keep = _kept(decomp, rel_tol, damping)
    if not keep.any():
        raise DegenerateSpectrum("every eigenvalue fell below the pseudo-inverse threshold")
    Q = decomp.eigenvectors[:, keep]
    coeffs = Q.T @ np.asarray(v, dtype=np.float64)
    inv = 1.0 / shifted[keep]
    coeffs = coeffs * (inv if coeffs.ndim == 1 else inv[:, None])
    return _check_finite("pinv_apply", Q @ coeffs)


def span_projection(decomp: SpectralDecomp, rel_tol: float, v) -> tuple[np.ndarray, np.ndarray]:
    """Split ``v`` into its kept-eigenspace and dropped-eigenspace components."""
    _, keep = _kept(decomp, rel_tol, 0.0)
    v = np.asarray(v, dtype=np.float64)
    Q = decomp.eigenvectors
    coeffs = Q.T @ v
    mask = keep if coeffs.ndim == 1 else keep[:, None]
    v_span = Q @ np.where(mask, coeffs, 0.0)
    v_null = Q @ np.where(mask, 0.0, coeffs)
    return v_span, v_null
