"""Dataset ingestion, standardization, removal subsets and batch schedules."""

from __future__ import annotations

import csv
import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dattr.numcore import ContractError

CONCRETE_COLUMNS = 9
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
BATCH_MODES = ("iid", "epoch-shuffle")

# stream tags for SeedSequence so init, batching and subsets never share a stream
_STREAM_BATCH = 1
_STREAM_SUBSETS = 2


class IngestionError(ValueError):
    """A dataset file is malformed; the message names the row or field."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DatasetTable:
    features: np.ndarray
    targets: np.ndarray
    task: str = "regression"
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ContractError("features must be an N x d matrix with N >= 1")
        if not np.all(np.isfinite(X)):
            raise ContractError("features contain non-finite values")
        if self.task not in ("regression", "classification"):
            raise ContractError(f"unknown task {self.task!r}")
        y = np.asarray(self.targets)
        y = y.astype(np.int64) if self.task == "classification" else y.astype(np.float64)
        if y.shape[0] != X.shape[0]:
            raise ContractError("features and targets disagree on N")
        object.__setattr__(self, "features", _readonly(X))
        object.__setattr__(self, "targets", _readonly(y))
        object.__setattr__(self, "ids", _readonly(np.arange(X.shape[0], dtype=np.int64)))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def take(self, rows: Sequence[int]) -> "DatasetTable":
        """New table with the given rows, re-identified as 0..len(rows)-1."""
        rows = np.asarray(rows, dtype=np.int64)
        return DatasetTable(self.features[rows], self.targets[rows], self.task)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.task.encode())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.targets, dtype="<f8").tobytes())
        return h.hexdigest()


def load_concrete(path) -> DatasetTable:
    """Read the UCI Concrete CSV: 8 feature columns then the strength target."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != CONCRETE_COLUMNS:
                raise IngestionError(f"row {lineno}: expected {CONCRETE_COLUMNS} columns, got {len(rec)}")
            try:
                vals = [float(c) for c in rec]
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header
                raise IngestionError(f"row {lineno}: unparsable cell in {rec!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError(f"row {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise IngestionError("no data rows")
    A = np.array(rows)
    return DatasetTable(A[:, :8], A[:, 8], "regression")


def _read_idx(path, magic: int, name: str) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    ndim = 3 if magic == IMAGES_MAGIC else 1
    header = 4 * (1 + ndim)
    if len(raw) < header:
        raise IngestionError(f"{name}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IngestionError(f"{name}: bad magic 0x{found:08x} (expected 0x{magic:08x})")
    shape = struct.unpack(">" + "I" * ndim, raw[4:header])
    body = raw[header:]
    if len(body) != math.prod(shape):
        raise IngestionError(f"{name}: truncated payload ({len(body)} bytes for shape {shape})")
    return shape, body


def load_mnist(images_path, labels_path) -> DatasetTable:
    """Read an IDX image/label pair; pixels scaled to [0, 1]."""
    shape, img = _read_idx(images_path, IMAGES_MAGIC, "images")
    (count,), lab = _read_idx(labels_path, LABELS_MAGIC, "labels")
    if count != shape[0]:
        raise IngestionError(f"count mismatch: {shape[0]} images vs {count} labels")
    labels = np.frombuffer(lab, dtype=np.uint8)
    if labels.size and labels.max() > 9:
        raise IngestionError(f"labels: value {int(labels.max())} outside 0..9")
    X = np.frombuffer(img, dtype=np.uint8).reshape(shape[0], shape[1] * shape[2]) / 255.0
    return DatasetTable(X, labels.astype(np.int64), "classification")


@dataclass(frozen=True)
class StandardizeStats:
    mean: np.ndarray
    scale: np.ndarray
    target_mean: float = 0.0
    target_scale: float = 1.0
    warnings: tuple[str, ...] = ()

    def transform_features(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    def transform_targets(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_scale

    def inverse(self, table: DatasetTable) -> DatasetTable:
        X = table.features * self.scale + self.mean
        y = table.targets
        if table.task == "regression":
            y = y * self.target_scale + self.target_mean
        return DatasetTable(X, y, table.task)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "target_mean": self.target_mean, "target_scale": self.target_scale,
                "warnings": list(self.warnings)}


def _center_scale(a: np.ndarray, label: str, notes: list[str]) -> tuple[np.ndarray, np.ndarray]:
    mu = a.mean(axis=0)
    sd = a.std(axis=0)
    zero = sd == 0
    for j in np.flatnonzero(np.atleast_1d(zero)):
        notes.append(f"{label} {j} has zero variance; centered only")
    sd = np.where(zero, 1.0, sd)
    return mu, sd


def standardize(table: DatasetTable) -> tuple[DatasetTable, StandardizeStats]:
    """Zero mean, unit population std for every feature (and regression target)."""
    if table.n < 2:
        raise ContractError("standardize needs at least two rows")
    notes: list[str] = []
    mu, sd = _center_scale(table.features, "feature", notes)
    ym, ys = 0.0, 1.0
    y = table.targets
    if table.task == "regression":
        m, s = _center_scale(y[:, None], "target", notes)
        ym, ys = float(m[0]), float(s[0])
        y = (y - ym) / ys
    for msg in notes:
        warnings.warn(msg)
    stats = StandardizeStats(mu, sd, ym, ys, tuple(notes))
    return DatasetTable((table.features - mu) / sd, y, table.task), stats


@dataclass(frozen=True)
class RemovalGroup:
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.indices)))
        if len(idx) != len(self.indices):
            raise ContractError("removal group has repeated ids")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    @property
    def is_null(self) -> bool:
        return not self.indices

    def check(self, n: int) -> None:
        if self.indices and (self.indices[0] < 0 or self.indices[-1] >= n):
            raise ContractError(f"removal group ids must lie in [0, {n})")

    def mask(self, n: int) -> np.ndarray:
        self.check(n)
        m = np.zeros(n, dtype=bool)
        m[list(self.indices)] = True
        return m


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_removal_subsets(n: int, n_subsets: int, fraction: float, seed: int) -> list[RemovalGroup]:
    if not 0.0 <= fraction < 1.0:
        raise ContractError(f"fraction must lie in [0, 1), got {fraction}")
    if n_subsets < 1:
        raise ContractError("n_subsets must be >= 1")
    size = round_half_up(fraction * n)
    if fraction > 0 and size == 0:
        raise ContractError(f"fraction {fraction} of N={n} rounds to an empty group")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), _STREAM_SUBSETS])))
    return [RemovalGroup(tuple(rng.choice(n, size, replace=False).tolist())) for _ in range(n_subsets)]


def singleton_groups(ids: Sequence[int]) -> list[RemovalGroup]:
    return [RemovalGroup((int(i),)) for i in ids]


@dataclass(frozen=True)
class BatchSchedule:
    mode: str
    n: int
    batch_size: int
    iters: int
    seed: int
    selections: np.ndarray

    def __len__(self):
        return self.iters

    def batch(self, t: int) -> np.ndarray:
        return self.selections[t]

    def to_bytes(self) -> bytes:
        """Platform-independent serialization."""
        head = f"dattr-schedule/1 {self.mode} {self.n} {self.batch_size} {self.iters} {self.seed}\n"
        return head.encode() + np.ascontiguousarray(self.selections, dtype="<i8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BatchSchedule":
        head, _, body = raw.partition(b"\n")
        tag, mode, n, b, t, seed = head.decode().split(" ")
        if tag != "dattr-schedule/1":
            raise IngestionError("not a batch schedule")
        sel = np.frombuffer(body, dtype="<i8").astype(np.int64).reshape(int(t), int(b))
        return cls(mode, int(n), int(b), int(t), int(seed), _readonly(sel))


def batch_schedule(n: int, batch_size: int, iters: int, mode: str, seed: int) -> BatchSchedule:
    if not 1 <= batch_size <= n:
        raise ContractError(f"batch size must satisfy 1 <= B <= N (B={batch_size}, N={n})")
    if iters < 0:
        raise ContractError("iters must be >= 0")
    if mode not in BATCH_MODES:
        raise ContractError(f"unknown batch mode {mode!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), _STREAM_BATCH])))
    sel = np.empty((iters, batch_size), dtype=np.int64)
    if mode == "iid":
        for t in range(iters):
            sel[t] = rng.choice(n, batch_size, replace=False)
    else:
        per_epoch = -(-n // batch_size)
        t = 0
        while t < iters:
            perm = rng.permutation(n)
            # pad the final short batch by wrapping to the start of the same permutation
            padded = np.concatenate([perm, perm[:per_epoch * batch_size - n]])
            for j in range(min(per_epoch, iters - t)):
                sel[t] = padded[j * batch_size:(j + 1) * batch_size]
                t += 1
    return BatchSchedule(mode, n, batch_size, iters, int(seed), _readonly(sel))


def derive_seed(base_seed: int, role: str, subset_id: int | None = None, replicate: int = 0) -> int:
    """Run seed from (base seed, role tag, subset id, replicate) by hashing."""
    key = f"{int(base_seed)}|{role}|{'-' if subset_id is None else int(subset_id)}|{int(replicate)}"
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little") >> 1


def synthetic_regression(n: int, d: int, seed: int, *, rank: int | None = None,
                         noise: float = 0.1) -> DatasetTable:
    """Gaussian-feature linear regression; ``rank < d`` gives collinear features."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 7])))
    rank = d if rank is None else rank
    Z = rng.normal(size=(n, rank))
    mix = rng.normal(size=(rank, d))
    X = Z @ mix if rank < d else Z
    w = rng.normal(size=d)
    y = X @ w + 0.5 + noise * rng.normal(size=n)
    return DatasetTable(X, y, "regression")
