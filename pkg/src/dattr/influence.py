"""Influence-function responses from exact or block-diagonal damped Hessians."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from dattr import kernels
from dattr import modelzoo as mz
from dattr import numcore
from dattr.dataio import DatasetTable, RemovalGroup
from dattr.numcore import ContractError, HessianMatrix, SpectralDecomp
from dattr.trainer import _Data, _weights
from dattr.unrolled import ResponseSet, _as_groups


class CalibrationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class HessianMode:
    kind: str = "exact"
    rel_tol: float = 1e-4
    damping: Optional[float] = None   # None -> training weight decay

    def __post_init__(self):
        if self.kind not in ("exact", "block-diagonal"):
            raise ContractError(f"unknown Hessian mode {self.kind!r}")
        if not 0.0 < self.rel_tol < 1.0:
            raise ContractError("rel_tol must lie in (0, 1)")
        if self.damping is not None and (not np.isfinite(self.damping) or self.damping < 0):
            raise ContractError("damping must be finite and >= 0")

    def resolved_damping(self, weight_decay: float) -> float:
        return float(weight_decay if self.damping is None else self.damping)


METHOD_MODES = {"if-exact": HessianMode("exact"), "if-blockdiag": HessianMode("block-diagonal")}


def _hvp_rows(data: _Data, theta: np.ndarray, coef: np.ndarray, idx: np.ndarray):
    def hvp_batch(V):
        V = np.ascontiguousarray(V)
        out = np.empty_like(V)
        kernels.hvp(data.dims, data.loss, theta, data.X, data.Y, idx, coef, V, out)
        return out
    return hvp_batch


def training_hessian(spec: mz.ModelSpec, table: DatasetTable, theta, weights=None, *,
                     cap: int = numcore.DEFAULT_HESSIAN_CAP) -> HessianMatrix:
    """Dense Hessian of the mean training loss ``(1/N) sum_n w_n l_n`` (no penalty term)."""
    data = _Data(spec, table)
    theta = numcore.as_param_vec(theta)
    w = _weights(table, weights)
    return numcore.dense_hessian(None, theta, hvp_batch=_hvp_rows(data, theta, w / table.n, table.ids), cap=cap)


def block_diagonal_hessian(spec: mz.ModelSpec, table: DatasetTable, weights, theta,
                           *, cap: int = numcore.DEFAULT_HESSIAN_CAP) -> list[HessianMatrix]:
    """Diagonal blocks (W_l, b_l per layer) of the training-loss Hessian.

    Each block is assembled from Hessian-vector products against that block's own
    basis vectors, so only the block is ever stored.
    """
    data = _Data(spec, table)
    theta = numcore.as_param_vec(theta)
    w = _weights(table, weights)
    if theta.size > cap:
        raise numcore.CapacityError(f"d_param {theta.size} exceeds the Hessian cap {cap}")
    hvp_batch = _hvp_rows(data, theta, w / table.n, table.ids)
    blocks = []
    for _, sl in mz.param_slices(spec):
        n = sl.stop - sl.start
        Hb = np.empty((n, n))
        for start in range(0, n, 128):
            stop = min(n, start + 128)
            basis = np.zeros((stop - start, theta.size))
            basis[np.arange(stop - start), sl.start + np.arange(start, stop)] = 1.0
            Hb[:, start:stop] = hvp_batch(basis)[:, sl].T
        scale = float(np.max(np.abs(Hb))) if Hb.size else 0.0
        asym = float(np.max(np.abs(Hb - Hb.T))) / scale if scale > 0 else 0.0
        blocks.append(HessianMatrix(0.5 * (Hb + Hb.T), asym))
    return blocks


class InfluenceEngine:
    """Damped, thresholded inverse of the (exact or block-diagonal) training Hessian at one theta.

    The eigendecomposition is computed once and reused for every group and probe.
    """

    def __init__(self, spec: mz.ModelSpec, table: DatasetTable, theta, mode: HessianMode = HessianMode(),
                 weight_decay: float = 0.0, weights=None):
        self.spec = spec
        self.table = table
        self.theta = numcore.as_param_vec(theta)
        self.mode = mode
        self.damping = mode.resolved_damping(weight_decay)
        self.weights = _weights(table, weights)
        self._data = _Data(spec, table)
        self.slices = [sl for _, sl in mz.param_slices(spec)]
        if mode.kind == "exact":
            self.hessian = training_hessian(spec, table, self.theta, self.weights)
            self.decomps = [numcore.eig_decompose(self.hessian)]
            self.slices = [slice(0, self.theta.size)]
        else:
            self.hessian = None
            self.decomps = [numcore.eig_decompose(b) for b in block_diagonal_hessian(spec, table, self.weights, self.theta)]

    def _apply_block(self, decomp: SpectralDecomp, V: np.ndarray) -> np.ndarray:
        if not np.any(decomp.eigenvalues + self.damping):
            return np.zeros_like(V)   # an all-zero block (e.g. dead units) contributes nothing
        return numcore.pinv_apply(decomp, self.mode.rel_tol, self.damping, V)

    def apply_inverse(self, V) -> np.ndarray:
        """``H~+ v`` for a vector, or for each row of a ``(k, d)`` matrix."""
        V = np.asarray(V, dtype=np.float64)
        M = np.atleast_2d(V)
        out = np.empty_like(M)
        for decomp, sl in zip(self.decomps, self.slices):
            out[:, sl] = self._apply_block(decomp, M[:, sl].T).T
        return out[0] if V.ndim == 1 else out

    def apply_hessian(self, V) -> np.ndarray:
        """Exact damped Hessian ``(grad^2 L + damping I) v`` (rows of ``V``)."""
        V = np.asarray(V, dtype=np.float64)
        M = np.ascontiguousarray(np.atleast_2d(V))
        out = _hvp_rows(self._data, self.theta, self.weights / self.table.n, self.table.ids)(M)
        out += self.damping * M
        return out[0] if V.ndim == 1 else out

    def example_grads(self, ids) -> np.ndarray:
        ids = np.ascontiguousarray(ids, dtype=np.int64)
        out = np.empty((ids.size, self.theta.size))
        d = self._data
        kernels.per_example_grads(d.dims, d.loss, self.theta, d.X, d.Y, ids, out)
        return out

    def group_gradients(self, groups: Sequence[RemovalGroup]) -> np.ndarray:
        """``(1/N) sum_{k in G} grad l_k`` per group."""
        out = np.zeros((len(groups), self.theta.size))
        for k, g in enumerate(groups):
            g.check(self.table.n)
            if not g.is_null:
                out[k] = self.example_grads(g.indices).sum(axis=0) / self.table.n
        return out

    def responses(self, groups, alpha: float | None = None) -> np.ndarray:
        groups = _as_groups(groups)
        r = self.apply_inverse(self.group_gradients(groups))
        return r / alpha if alpha is not None else r


@dataclass
class InfluenceResponse(ResponseSet):
    alpha: Optional[float] = None

    def __post_init__(self):
        super().__post_init__()
        if self.alpha is not None and not self.alpha > 0:
            raise ContractError("alpha must be positive")
        if not np.all(np.isfinite(self.r_theta)):
            raise numcore.NumericFailure("if_response")
        self.meta = dict(self.meta, alpha=self.alpha)


def if_response(spec: mz.ModelSpec, table: DatasetTable, theta, group, mode: HessianMode = HessianMode(),
                weight_decay: float = 0.0, *, engine: InfluenceEngine | None = None,
                alpha: float | None = None) -> InfluenceResponse:
    """``r(G) = (1/N) sum_{k in G} H~+ grad l_k(theta)`` for one group or a list of groups."""
    groups = [group] if isinstance(group, RemovalGroup) or (group and np.isscalar(group[0])) else group
    groups = _as_groups(groups)
    eng = engine or InfluenceEngine(spec, table, theta, mode, weight_decay)
    meta = {"mode": mode.kind, "rel_tol": mode.rel_tol, "damping": eng.damping}
    method = "if-exact" if mode.kind == "exact" else "if-blockdiag"
    return InfluenceResponse(groups, eng.responses(groups, alpha), eng.theta.copy(), -1, method, meta, alpha)


def inverse_scale(inv_apply: Callable, hess_apply: Callable, probes) -> float:
    """Minimizer of ``sum_i ||s u_i - v_i||^2`` with ``u_i = H~+ H v_i``: ``sum <u,v> / sum ||u||^2``."""
    P = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if P.shape[0] == 0 or P.size == 0:
        raise CalibrationError("no calibration probes")
    U = np.atleast_2d(inv_apply(hess_apply(P)))
    uu = float(np.sum(U * U))
    if uu == 0.0:
        raise CalibrationError("every probe maps to zero under H~+ H")
    s = float(np.sum(U * P)) / uu
    if not s > 0:
        raise CalibrationError(f"calibration scale {s:g} is not positive")
    return s


def calibrate_alpha(inv_apply: Callable, hess_apply: Callable, probes) -> float:
    """Scale ``alpha`` for the Hessian approximation, so that ``alpha * H~`` best matches ``H``.

    The calibrated inverse is ``H~+ / alpha``, which equals ``s * H~+`` for the
    least-squares inverse scale ``s`` of :func:`inverse_scale`; ``alpha = 1/s``.
    """
    return 1.0 / inverse_scale(inv_apply, hess_apply, probes)


def calibrate_engine(engine: InfluenceEngine, probe_ids=None) -> float:
    """``alpha`` for an engine using per-example training gradients as probes."""
    ids = engine.table.ids if probe_ids is None else np.asarray(probe_ids)
    return calibrate_alpha(engine.apply_inverse, engine.apply_hessian, engine.example_grads(ids))
