"""Forward-mode unrolled differentiation of a training run w.r.t. removal-group weights.

For each group ``G`` the perturbed weights are ``w_n = 1 - eps * [n in G]`` and the
tracked removal response is ``r = d theta / d eps`` at ``eps = 0`` (equivalently
``-d theta / d w_G``). The response rides along with training:

    gdot  = (1/B) sum_b w_b H_b r  -  (1/B) sum_{b in G} grad l_b  +  wd * r
    gdot' = clip Jacobian applied to gdot
    rv    = mu * rv + gdot'
    r     = r - lr * rv

so that excluding the group corresponds to ``theta_T + r``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from dattr import kernels
from dattr import modelzoo as mz
from dattr.dataio import BatchSchedule, DatasetTable, RemovalGroup
from dattr.numcore import ContractError
from dattr.trainer import (DivergenceError, OptimState, TrainConfig, _Data, _lrs, _weights,
                           make_schedule)


class ResponseDivergence(DivergenceError):
    def __init__(self, iteration: int, group: int):
        self.group = group
        super().__init__(iteration, f"non-finite response for group {group}")


@dataclass
class ResponseState:
    r_theta: np.ndarray      # (K, d)
    r_velocity: np.ndarray   # (K, d)

    @classmethod
    def zeros(cls, k: int, d: int) -> "ResponseState":
        return cls(np.zeros((k, d)), np.zeros((k, d)))

    def copy(self) -> "ResponseState":
        return ResponseState(self.r_theta.copy(), self.r_velocity.copy())


def _as_groups(groups) -> list[RemovalGroup]:
    return [g if isinstance(g, RemovalGroup) else RemovalGroup(tuple(g)) for g in groups]


def membership(groups: Sequence[RemovalGroup], n: int) -> np.ndarray:
    M = np.zeros((len(groups), n))
    for k, g in enumerate(groups):
        M[k] = g.mask(n)
    return M


class _Propagator:
    """Response update for one step given the gradient already formed at theta_t."""

    def __init__(self, data: _Data, member: np.ndarray, w: np.ndarray, config: TrainConfig):
        self.data = data
        self.member = member
        self.w = w
        self.config = config
        self.K = member.shape[0]

    def gdot(self, theta, rstate: ResponseState, idx) -> np.ndarray:
        """Derivative of the combined batch gradient, before clipping."""
        d = self.data
        B = idx.shape[0]
        out = np.empty_like(rstate.r_theta)
        kernels.hvp(d.dims, d.loss, theta, d.X, d.Y, idx, self.w[idx] / B, rstate.r_theta, out)
        sel = self.member[:, idx]
        hit = sel.any(axis=0)
        if hit.any():
            cols = np.ascontiguousarray(idx[hit])
            pg = np.empty((cols.size, theta.size))
            kernels.per_example_grads(d.dims, d.loss, theta, d.X, d.Y, cols, pg)
            out -= (sel[:, hit] / B) @ pg
        if self.config.weight_decay:
            out += self.config.weight_decay * rstate.r_theta
        return out

    def advance(self, rstate: ResponseState, gdot, g, norm: float, scale: float, lr: float) -> ResponseState:
        if scale < 1.0:
            ghat = g / norm
            gdot = scale * (gdot - np.outer(gdot @ ghat, ghat))
        rv = self.config.momentum * rstate.r_velocity + gdot
        return ResponseState(rstate.r_theta - lr * rv, rv)


def _check_finite(rstate: ResponseState, t: int) -> None:
    bad = ~np.all(np.isfinite(rstate.r_theta), axis=1) | ~np.all(np.isfinite(rstate.r_velocity), axis=1)
    if bad.any():
        raise ResponseDivergence(t, int(np.flatnonzero(bad)[0]))


def response_step(spec: mz.ModelSpec, table: DatasetTable, theta, state: OptimState, rstate: ResponseState,
                  batch, config: TrainConfig, lr: float, groups, weights=None, t: int = 0) -> ResponseState:
    """One exact forward-mode step of the responses (``state`` is the velocity before the step)."""
    groups = _as_groups(groups)
    data = _Data(spec, table)
    w = _weights(table, weights)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    if rstate.r_theta.shape != (len(groups), theta.size):
        raise ContractError("response state does not match groups x parameters")
    idx = np.ascontiguousarray(batch, dtype=np.int64)
    prop = _Propagator(data, membership(groups, table.n), w, config)
    g = np.empty_like(theta)
    kernels.loss_grad(data.dims, data.loss, theta, data.X, data.Y, idx, w[idx] / idx.size, g)
    g += config.weight_decay * theta
    gd = prop.gdot(theta, rstate, idx)
    norm = float(np.sqrt(np.dot(g, g)))
    clip = config.clip
    scale = clip / norm if clip > 0 and norm > clip else 1.0
    out = prop.advance(rstate, gd, g, norm, scale, lr)
    _check_finite(out, t)
    return out


@dataclass
class ResponseSet:
    groups: list[RemovalGroup]
    r_theta: np.ndarray
    theta: np.ndarray
    seed: int
    method: str = "unrolled"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.groups = _as_groups(self.groups)
        self.r_theta = np.asarray(self.r_theta, dtype=np.float64).reshape(len(self.groups), -1)
        self._index = {g.indices: k for k, g in enumerate(self.groups)}

    def response(self, group) -> np.ndarray:
        key = (group if isinstance(group, RemovalGroup) else RemovalGroup(tuple(group))).indices
        if key not in self._index:
            raise ContractError(f"group {key[:5]}{'...' if len(key) > 5 else ''} not in this response set")
        return self.r_theta[self._index[key]]

    def save(self, path) -> None:
        lengths = np.array([len(g) for g in self.groups], dtype=np.int64)
        flat = np.array([i for g in self.groups for i in g.indices], dtype=np.int64)
        meta = dict(self.meta, seed=int(self.seed), method=self.method)
        with open(path, "wb") as fh:
            np.savez(fh, r_theta=self.r_theta.astype("<f8"), theta=np.asarray(self.theta, dtype="<f8"),
                     group_lengths=lengths, group_ids=flat,
                     meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path) -> "ResponseSet":
        z = np.load(Path(path))
        meta = json.loads(z["meta"].tobytes().decode())
        bounds = np.concatenate([[0], np.cumsum(z["group_lengths"])])
        ids = z["group_ids"]
        groups = [RemovalGroup(tuple(ids[a:b].tolist())) for a, b in zip(bounds[:-1], bounds[1:])]
        seed = meta.pop("seed")
        method = meta.pop("method")
        return cls(groups, z["r_theta"], z["theta"], seed, method, meta)


RHook = Callable[[int, np.ndarray, ResponseState], None]


def unrolled_run(spec: mz.ModelSpec, table: DatasetTable, config: TrainConfig, seed: int, groups,
                 hooks: Optional[RHook] = None, *, weights=None, schedule: Optional[BatchSchedule] = None,
                 lr_override=None) -> ResponseSet:
    """Train and propagate every group's response in lock-step.

    The parameter trajectory is bitwise identical to ``train_run`` with the same
    arguments. ``hooks(t, theta_t, rstate_t)`` sees ``t = 0..T``. Memory does not
    grow with ``T``.
    """
    groups = _as_groups(groups)
    if not groups:
        raise ContractError("unrolled_run needs at least one group")
    if config.loss_kind != spec.loss_kind:
        raise ContractError("config and model disagree on the loss kind")
    data = _Data(spec, table)
    w = _weights(table, weights)
    sched = make_schedule(table, config, seed) if schedule is None else schedule
    lrs = _lrs(config, lr_override)
    prop = _Propagator(data, membership(groups, table.n), w, config)
    theta = mz.init_params(spec, seed)
    vel = np.zeros_like(theta)
    rstate = ResponseState.zeros(len(groups), theta.size)
    g = np.empty_like(theta)
    B = config.batch_size
    for t in range(config.iters):
        if hooks is not None:
            hooks(t, theta, rstate)
        idx = sched.selections[t]
        # same operation sequence as kernels.train_step, so theta matches train_run bit for bit
        value = kernels.loss_grad(data.dims, data.loss, theta, data.X, data.Y, idx, w[idx] / B, g)
        if not np.isfinite(value):
            raise DivergenceError(t, "non-finite loss")
        g += config.weight_decay * theta
        gd = prop.gdot(theta, rstate, idx)
        norm, scale = kernels.sgd_update(theta, vel, g, lrs[t], config.momentum, config.clip)
        rstate = prop.advance(rstate, gd, g, norm, scale, lrs[t])
        _check_finite(rstate, t)
    if hooks is not None:
        hooks(config.iters, theta, rstate)
    return ResponseSet(groups, rstate.r_theta, theta.copy(), seed, "unrolled",
                       {"config": config.digest(), "spec": mz.spec_hash(spec)})


def closed_form_response(spec: mz.ModelSpec, table: DatasetTable, trajectory, schedule: BatchSchedule,
                         group, lrs, config: TrainConfig | None = None) -> np.ndarray:
    """Sum-of-products expansion of the vanilla-SGD response, built from dense batch Hessians.

    ``r_T = sum_t [prod_{l=t+1}^{T-1} (I - lr_l H_l)] (lr_t / B) sum_{k in G} c_k^t grad l_k(theta_t)``
    with later factors on the left, ``H_l`` the batch-mean Hessian and ``c_k^t`` the
    multiplicity of ``k`` in batch ``t``. Evaluated with JAX autodiff, independent of
    the hand-written kernels.
    """
    if config is not None and (config.momentum != 0 or config.weight_decay != 0 or config.clip_norm is not None):
        raise ContractError("closed form holds for vanilla SGD only (no momentum, decay or clipping)")
    traj = np.asarray(trajectory, dtype=np.float64)
    T = traj.shape[0]
    d = mz.n_params(spec)
    if T == 0:
        return np.zeros(d)
    grp = group if isinstance(group, RemovalGroup) else RemovalGroup(tuple(group))
    grp.check(table.n)
    lrs = np.asarray(lrs, dtype=np.float64)
    _, gradf, hvb = mz.jax_loss_ops(spec)
    X = table.features
    Y = mz.encode_targets(spec, table.targets)
    members = np.array(grp.indices, dtype=np.int64)
    r = np.zeros(d)
    P = np.eye(d)   # product of the factors after step t
    eye = np.eye(d)
    for t in range(T - 1, -1, -1):
        idx = schedule.selections[t]
        B = idx.shape[0]
        counts = np.array([np.sum(idx == k) for k in members], dtype=np.float64)
        if counts.any():
            a = np.asarray(gradf(traj[t], X[members], Y[members], counts * lrs[t] / B))
            r += P @ a
        H = np.asarray(hvb(traj[t], X[idx], Y[idx], np.full(B, 1.0 / B), eye))
        H = 0.5 * (H + H.T)
        P = P @ (eye - lrs[t] * H)
    return r


def record_trajectory(spec: mz.ModelSpec, table: DatasetTable, config: TrainConfig, seed: int,
                      **kw) -> tuple[np.ndarray, np.ndarray]:
    """Train with a hook that caches theta_0..theta_{T-1}; returns (trajectory, theta_T)."""
    from dattr.trainer import train_run

    traj = []
    theta_T = train_run(spec, table, config, seed=seed, hooks=lambda t, th, st, b: traj.append(th.copy()), **kw)
    return np.array(traj), theta_T


def predict_removed_params(theta_T, rset: ResponseSet, group) -> np.ndarray:
    return np.asarray(theta_T, dtype=np.float64) + rset.response(group)


def predict_measurement(theta_T, rset: ResponseSet, group, mspec: mz.MeasurementSpec,
                        spec: mz.ModelSpec) -> float:
    """First-order removal prediction ``m(theta_T) + grad m(theta_T) . r_G``."""
    r = rset.response(group)
    return mz.measurement(mspec, spec, theta_T) + float(mz.measurement_grad(mspec, spec, theta_T) @ r)
