"""Deterministic SGD with momentum, weight decay, warmup, clipping and example weights."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from dattr import kernels
from dattr import modelzoo as mz
from dattr.dataio import BATCH_MODES, BatchSchedule, DatasetTable, batch_schedule, round_half_up
from dattr.numcore import ContractError


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, detail: str = ""):
        self.iteration = iteration
        super().__init__(f"training diverged at iteration {iteration}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-5
    clip_norm: Optional[float] = 1.0
    iters: int = 580
    batch_size: int = 32
    warmup_frac: float = 0.1
    loss_kind: str = "half-mse"
    batch_mode: str = "epoch-shuffle"

    def __post_init__(self):
        if self.iters < 1:
            raise ContractError("iters must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ContractError("clip_norm must be positive or None")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ContractError("warmup_frac must lie in [0, 1)")
        if self.batch_mode not in BATCH_MODES:
            raise ContractError(f"unknown batch mode {self.batch_mode!r}")
        if self.loss_kind not in mz.LOSS_CODES:
            raise ContractError(f"unknown loss kind {self.loss_kind!r}")

    @property
    def clip(self) -> float:
        """Clip threshold as the kernels expect it (0 disables)."""
        return 0.0 if self.clip_norm is None else float(self.clip_norm)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# App. E.1 settings
CONCRETE_CONFIG = TrainConfig()
MNIST_CONFIG = TrainConfig(base_lr=0.03, momentum=0.9, weight_decay=1e-3, clip_norm=None, iters=1560,
                           batch_size=64, warmup_frac=0.05, loss_kind="cross-entropy")


@dataclass
class OptimState:
    velocity: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "OptimState":
        return cls(np.zeros(d))


def warmup_iters(config: TrainConfig) -> int:
    return max(1, round_half_up(config.warmup_frac * config.iters))


def lr_at(config: TrainConfig, t: int) -> float:
    if not 0 <= t < config.iters:
        raise ContractError(f"iteration {t} outside [0, {config.iters})")
    return config.base_lr * min(1.0, (t + 1) / warmup_iters(config))


def lr_schedule(config: TrainConfig) -> np.ndarray:
    w = warmup_iters(config)
    t = np.arange(config.iters, dtype=np.float64)
    return config.base_lr * np.minimum(1.0, (t + 1) / w)


def _weights(table: DatasetTable, weights) -> np.ndarray:
    if weights is None:
        return np.ones(table.n)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if w.shape != (table.n,):
        raise ContractError(f"weight vector must have length {table.n}")
    if np.any(w < 0) or np.any(w > 1):
        raise ContractError("example weights must lie in [0, 1]")
    return w


class _Data:
    """Kernel-ready views of a table for one model spec."""

    def __init__(self, spec: mz.ModelSpec, table: DatasetTable):
        if table.d_in != spec.dims[0]:
            raise ContractError(f"table has {table.d_in} features, model expects {spec.dims[0]}")
        self.dims = mz.dims_array(spec)
        self.loss = mz.loss_code(spec)
        self.X = np.ascontiguousarray(table.features)
        self.Y = mz.encode_targets(spec, table.targets)


def batch_gradient(spec: mz.ModelSpec, table: DatasetTable, theta, batch, weights=None,
                   weight_decay: float = 0.0) -> np.ndarray:
    """``(1/B) sum_b w_b grad l_b + wd * theta`` over the batch ids."""
    idx = np.ascontiguousarray(batch, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("batch must be nonempty")
    data = _Data(spec, table)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    w = _weights(table, weights)
    g = np.empty_like(theta)
    kernels.loss_grad(data.dims, data.loss, theta, data.X, data.Y, idx, w[idx] / idx.size, g)
    g += weight_decay * theta
    return g


def sgd_step(theta, state: OptimState, g, lr: float, config: TrainConfig) -> tuple[np.ndarray, OptimState]:
    """Clip by global norm, heavy-ball momentum, parameter step. Returns new copies."""
    th = np.array(theta, dtype=np.float64)
    v = np.array(state.velocity, dtype=np.float64)
    kernels.sgd_update(th, v, np.ascontiguousarray(g, dtype=np.float64), float(lr), config.momentum,
                       config.clip)
    return th, OptimState(v)


Hook = Callable[[int, np.ndarray, OptimState, np.ndarray], None]


def make_schedule(table: DatasetTable, config: TrainConfig, seed: int) -> BatchSchedule:
    return batch_schedule(table.n, config.batch_size, config.iters, config.batch_mode, seed)


def _lrs(config: TrainConfig, lr_override) -> np.ndarray:
    if lr_override is None:
        return lr_schedule(config)
    lrs = np.ascontiguousarray(lr_override, dtype=np.float64)
    if lrs.shape != (config.iters,):
        raise ContractError(f"lr_override must have length {config.iters}")
    return lrs


def train_run(spec: mz.ModelSpec, table: DatasetTable, config: TrainConfig, weights=None, seed: int = 0,
              hooks: Optional[Hook] = None, *, schedule: Optional[BatchSchedule] = None,
              lr_override=None, init=None) -> np.ndarray:
    """Train from ``init_params(spec, seed)`` over the seed's batch schedule and return theta_T.

    ``hooks(t, theta_t, state_t, batch_t)`` runs before step ``t``. ``lr_override``
    replaces the warmup schedule with an explicit per-step learning rate array.
    """
    if config.loss_kind != spec.loss_kind:
        raise ContractError("config and model disagree on the loss kind")
    data = _Data(spec, table)
    w = _weights(table, weights)
    sched = make_schedule(table, config, seed) if schedule is None else schedule
    if sched.selections.shape != (config.iters, config.batch_size) or sched.n != table.n:
        raise ContractError("batch schedule does not match the config and table")
    lrs = _lrs(config, lr_override)
    theta = mz.init_params(spec, seed) if init is None else np.array(init, dtype=np.float64)
    vel = np.zeros_like(theta)
    wd, mom, clip = config.weight_decay, config.momentum, config.clip
    if hooks is None:
        status = kernels.train_loop(data.dims, data.loss, theta, vel, data.X, data.Y, sched.selections,
                                    w, lrs, wd, mom, clip)
        if status >= 0:
            raise DivergenceError(status, "non-finite loss")
    else:
        gbuf = np.empty_like(theta)
        B = config.batch_size
        for t in range(config.iters):
            idx = sched.selections[t]
            hooks(t, theta, OptimState(vel), idx)
            value = kernels.train_step(data.dims, data.loss, theta, vel, data.X, data.Y, idx, w[idx] / B,
                                       wd, lrs[t], mom, clip, gbuf)
            if not np.isfinite(value):
                raise DivergenceError(t, "non-finite loss")
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(config.iters - 1, "non-finite parameters")
    return theta


def training_loss(spec: mz.ModelSpec, table: DatasetTable, theta, weights=None,
                  weight_decay: float = 0.0) -> float:
    """Mean (weighted) loss over the table plus ``(wd/2)||theta||^2``."""
    data = _Data(spec, table)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    w = _weights(table, weights)
    losses = kernels.per_example_losses(data.dims, data.loss, theta, data.X, data.Y, table.ids)
    return float(np.dot(w, losses) / table.n + 0.5 * weight_decay * np.dot(theta, theta))


# Checkpoints ---------------------------------------------------------------

_CK_MAGIC = b"DATTRCK1"
_CK_HEAD = struct.Struct("<8s32sQqQ")


def save_checkpoint(path, spec: mz.ModelSpec, theta, iteration: int, seed: int) -> None:
    theta = np.ascontiguousarray(theta, dtype="<f8")
    head = _CK_HEAD.pack(_CK_MAGIC, bytes.fromhex(mz.spec_hash(spec)), int(iteration), int(seed), theta.size)
    Path(path).write_bytes(head + theta.tobytes())


def load_checkpoint(path, spec: mz.ModelSpec | None = None) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _CK_HEAD.size:
        raise ContractError(f"{path}: truncated checkpoint")
    magic, digest, it, seed, d = _CK_HEAD.unpack(raw[:_CK_HEAD.size])
    if magic != _CK_MAGIC:
        raise ContractError(f"{path}: not a checkpoint")
    if spec is not None and digest.hex() != mz.spec_hash(spec):
        raise ContractError(f"{path}: checkpoint belongs to a different model spec")
    body = raw[_CK_HEAD.size:]
    if len(body) != 8 * d:
        raise ContractError(f"{path}: truncated parameter block")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return theta, {"spec_hash": digest.hex(), "iteration": it, "seed": seed}
