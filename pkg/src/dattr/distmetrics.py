"""Difference functions between empirical measurement distributions, rank statistics, LDS."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from dattr.numcore import ContractError

DELTA_KINDS = ("mean", "variance", "wasserstein")


class UndefinedCorrelation(ArithmeticError):
    pass


@dataclass(frozen=True)
class EmpiricalDistribution:
    samples: np.ndarray
    provenance: str = "retrained"
    query_id: int = 0
    subset_id: int | None = None

    def __post_init__(self):
        s = np.sort(np.asarray(self.samples, dtype=np.float64).ravel())
        if s.size < 1:
            raise ContractError("empirical distribution needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise ContractError("samples must be finite")
        if self.provenance not in ("retrained", "predicted"):
            raise ContractError(f"unknown provenance {self.provenance!r}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size


def _samples(P) -> np.ndarray:
    if isinstance(P, EmpiricalDistribution):
        return P.samples
    s = np.sort(np.asarray(P, dtype=np.float64).ravel())
    if s.size < 1:
        raise ContractError("distribution needs at least one sample")
    return s


def mean_shift(P, Q) -> float:
    """``mean(P) - mean(Q)`` with P the original and Q the removed distribution."""
    return float(np.mean(_samples(P)) - np.mean(_samples(Q)))


def variance_increase(P, Q) -> float:
    """``Var(Q) - Var(P)`` with unbiased sample variances."""
    p, q = _samples(P), _samples(Q)
    if p.size < 2 or q.size < 2:
        raise ContractError("variance needs at least two samples on each side")
    return float(np.var(q, ddof=1) - np.var(p, ddof=1))


def wasserstein2(P, Q) -> float:
    """2-Wasserstein distance between 1-D empirical measures via quantile functions."""
    p, q = _samples(P), _samples(Q)
    n, m = p.size, q.size
    if n == m:
        return float(math.sqrt(np.mean((p - q) ** 2)))
    # breakpoints of both quantile functions on a common integer grid of step 1/(n*m)
    cuts = np.union1d(np.arange(1, n + 1) * m, np.arange(1, m + 1) * n)
    lo = np.concatenate([[0], cuts[:-1]])
    width = (cuts - lo) / (n * m)
    ip = lo // m        # quantile index of P on (lo, cut]
    iq = lo // n
    return float(math.sqrt(np.sum(width * (p[ip] - q[iq]) ** 2)))


DELTA_FUNCS = {"mean": mean_shift, "variance": variance_increase, "wasserstein": wasserstein2}


def delta(kind: str, P, Q) -> float:
    if kind not in DELTA_FUNCS:
        raise ContractError(f"unknown delta kind {kind!r}")
    return DELTA_FUNCS[kind](P, Q)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if den == 0.0:
        raise UndefinedCorrelation("correlation undefined for a constant input")
    return float(np.clip(np.dot(a, b) / den, -1.0, 1.0))


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ContractError("pearson needs two equal-length vectors of length >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelation("correlation undefined for a constant input")
    return _pearson(x, y)


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ContractError("spearman needs two equal-length vectors of length >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelation("rank correlation undefined for a constant input")
    return _pearson(rankdata(x), rankdata(y))


def lds(true_scores, pred_scores) -> float:
    """Spearman over subsets; with a ``(M, Q)`` matrix the per-query values are averaged."""
    t = np.asarray(true_scores, dtype=np.float64)
    p = np.asarray(pred_scores, dtype=np.float64)
    if t.shape != p.shape:
        raise ContractError("true and predicted score arrays differ in shape")
    if t.shape[0] < 2:
        raise ContractError("LDS needs at least two subsets")
    if t.ndim == 1:
        return spearman(t, p)
    return float(np.mean([spearman(t[:, q], p[:, q]) for q in range(t.shape[1])]))


def rank_by_magnitude(values, ids=None) -> list[int]:
    """Ids ordered by |value| descending; ties broken by ascending id."""
    v = np.asarray(values, dtype=np.float64)
    ids = list(range(v.size)) if ids is None else [int(i) for i in ids]
    return [i for _, i in sorted(zip(-np.abs(v), ids))]


def _positions(rank: Sequence[int]) -> dict[int, int]:
    pos = {int(i): p for p, i in enumerate(rank)}
    if len(pos) != len(rank):
        raise ContractError("ranking contains repeated ids")
    return pos


def footrule(rank_a: Sequence[int], rank_b: Sequence[int]) -> int:
    pa, pb = _positions(rank_a), _positions(rank_b)
    if pa.keys() != pb.keys():
        raise ContractError("rankings permute different id sets")
    return int(sum(abs(pa[i] - pb[i]) for i in pa))


def top_k_overlap(rank_a: Sequence[int], rank_b: Sequence[int], k_frac: float = 0.1) -> float:
    pa, pb = _positions(rank_a), _positions(rank_b)
    if pa.keys() != pb.keys():
        raise ContractError("rankings permute different id sets")
    if not 0 < k_frac <= 1:
        raise ContractError("k_frac must lie in (0, 1]")
    k = math.ceil(k_frac * len(rank_a) - 1e-12)
    return len(set(rank_a[:k]) & set(rank_b[:k])) / k


@dataclass(frozen=True)
class ScoreRow:
    subset_id: int
    query_id: int
    method: str
    delta: str
    value: float


class ScoreTable:
    HEADER = ("subset_id", "query_id", "method", "delta", "value")

    def __init__(self, rows: Iterable[ScoreRow] = ()):
        self._rows: dict[tuple, ScoreRow] = {}
        for r in rows:
            self.add(r)

    def add(self, row: ScoreRow) -> None:
        key = (row.subset_id, row.query_id, row.method, row.delta)
        if key in self._rows:
            raise ContractError(f"duplicate score row {key}")
        if row.delta not in DELTA_KINDS:
            raise ContractError(f"unknown delta kind {row.delta!r}")
        self._rows[key] = row

    def put(self, subset_id: int, query_id: int, method: str, delta_kind: str, value: float) -> None:
        self.add(ScoreRow(int(subset_id), int(query_id), method, delta_kind, float(value)))

    def rows(self) -> list[ScoreRow]:
        return [self._rows[k] for k in sorted(self._rows)]

    def __len__(self):
        return len(self._rows)

    def methods(self) -> list[str]:
        return sorted({r.method for r in self._rows.values()})

    def matrix(self, method: str, delta_kind: str) -> tuple[list[int], list[int], np.ndarray]:
        """``(subset_ids, query_ids, values[M, Q])`` for one method and delta."""
        sel = [r for r in self.rows() if r.method == method and r.delta == delta_kind]
        subs = sorted({r.subset_id for r in sel})
        qs = sorted({r.query_id for r in sel})
        M = np.full((len(subs), len(qs)), np.nan)
        si = {s: i for i, s in enumerate(subs)}
        qi = {q: i for i, q in enumerate(qs)}
        for r in sel:
            M[si[r.subset_id], qi[r.query_id]] = r.value
        return subs, qs, M

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.rows():
            w.writerow([r.subset_id, r.query_id, r.method, r.delta, repr(r.value)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScoreTable":
        rd = csv.reader(io.StringIO(text))
        head = next(rd)
        if tuple(head) != cls.HEADER:
            raise ContractError(f"unexpected score table header {head}")
        return cls(ScoreRow(int(a), int(b), c, d, float(e)) for a, b, c, d, e in rd)
