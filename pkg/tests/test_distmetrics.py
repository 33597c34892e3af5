import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dattr import distmetrics as dm
from dattr.distmetrics import EmpiricalDistribution, ScoreTable, UndefinedCorrelation
from dattr.numcore import ContractError

from oracles import footrule_direct, spearman_formula, spearman_pearson_of_ranks, w2_bruteforce

samples = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=6)


# size pairs whose common refinement has at most 8 atoms, so the enumeration stays small
SIZE_PAIRS = [(n, m) for n in range(1, 7) for m in range(1, 7) if n * m // math.gcd(n, m) <= 8]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(SIZE_PAIRS), st.data())
def test_wasserstein_against_coupling_enumeration(nm, data):
    n, m = nm
    vals = st.floats(-10, 10, allow_nan=False)
    p = data.draw(st.lists(vals, min_size=n, max_size=n))
    q = data.draw(st.lists(vals, min_size=m, max_size=m))
    assert abs(dm.wasserstein2(p, q) - w2_bruteforce(p, q)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(samples, samples, st.floats(-5, 5))
def test_wasserstein_metric_properties(p, q, c):
    assert dm.wasserstein2(p, p) == 0.0
    assert dm.wasserstein2(p, q) == pytest.approx(dm.wasserstein2(q, p), abs=1e-12)
    assert dm.wasserstein2(np.add(p, c), p) == pytest.approx(abs(c), abs=1e-9)
    assert dm.wasserstein2(p, q) >= abs(np.mean(p) - np.mean(q)) - 1e-9


def test_delta_examples():
    P = EmpiricalDistribution([0.0, 2.0])
    Q = EmpiricalDistribution([1.0, 5.0])
    assert dm.mean_shift(P, Q) == -2.0
    assert dm.variance_increase(P, Q) == pytest.approx(8.0 - 2.0)
    assert dm.wasserstein2([0.0], [3.0]) == 3.0
    assert dm.delta("wasserstein", P, Q) == pytest.approx(np.sqrt((1 + 9) / 2))
    with pytest.raises(ContractError):
        dm.delta("kl", P, Q)
    with pytest.raises(ContractError):
        dm.variance_increase([1.0], [1.0, 2.0])


def test_distribution_contracts():
    d = EmpiricalDistribution([3.0, 1.0, 2.0], "predicted", 4, 2)
    np.testing.assert_array_equal(d.samples, [1, 2, 3])
    assert not d.samples.flags.writeable and len(d) == 3
    for bad in ([], [np.inf]):
        with pytest.raises(ContractError):
            EmpiricalDistribution(bad)
    with pytest.raises(ContractError):
        EmpiricalDistribution([1.0], "guessed")


distinct = st.lists(st.integers(-1000, 1000), min_size=2, max_size=12, unique=True)


@settings(max_examples=60, deadline=None)
@given(distinct, st.randoms(use_true_random=False))
def test_spearman_against_rank_formula(x, rnd):
    y = list(x)
    rnd.shuffle(y)
    if len(set(y)) < 2:
        return
    assert abs(dm.spearman(x, y) - spearman_formula(x, y)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=3, max_size=15))
def test_spearman_with_ties(pairs):
    x, y = [a for a, _ in pairs], [b for _, b in pairs]
    if len(set(x)) < 2 or len(set(y)) < 2:
        with pytest.raises(UndefinedCorrelation):
            dm.spearman(x, y)
        return
    assert abs(dm.spearman(x, y) - spearman_pearson_of_ranks(x, y)) < 1e-12


def test_correlation_examples_and_contracts():
    assert dm.spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert dm.spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert dm.spearman([1, 2, 3, 4], np.exp([1, 2, 3, 4])) == 1.0
    assert dm.pearson([0, 1, 2], [1, 3, 5]) == pytest.approx(1.0)
    with pytest.raises(UndefinedCorrelation):
        dm.pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ContractError):
        dm.spearman([1, 2], [1, 2, 3])


def test_lds_matrix_and_oracle():
    rng = np.random.default_rng(0)
    T = rng.normal(size=(20, 3))
    assert dm.lds(T, T) == 1.0
    assert dm.lds(T, 2 * T + 1) == 1.0
    assert dm.lds(T[:, 0], -T[:, 0]) == -1.0
    with pytest.raises(ContractError):
        dm.lds(T[:1], T[:1])


def test_shuffled_lds_null_is_small():
    rng = np.random.default_rng(1)
    T = rng.normal(size=20)
    vals = np.array([dm.lds(T, T[rng.permutation(20)]) for _ in range(500)])
    assert np.mean(np.abs(vals) < 0.3) >= 0.8
    assert abs(vals.mean()) < 0.05


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_footrule_against_direct(vals, rnd):
    ra = dm.rank_by_magnitude(vals)
    rb = list(ra)
    rnd.shuffle(rb)
    assert dm.footrule(ra, rb) == footrule_direct(ra, rb)
    assert dm.footrule(ra, ra) == 0
    n = len(ra)
    assert 0 <= dm.footrule(ra, rb) <= n * n // 2
    assert dm.top_k_overlap(ra, ra) == 1.0


def test_rank_ties_and_overlap():
    assert dm.rank_by_magnitude([0.5, -2.0, 2.0, 0.1]) == [1, 2, 0, 3]
    assert dm.rank_by_magnitude([1.0, 1.0], ids=[9, 4]) == [4, 9]
    assert dm.footrule(list(range(20)), list(range(20))[::-1]) == 200
    assert dm.top_k_overlap(list(range(20)), list(range(20))[::-1], 0.1) == 0.0
    assert dm.top_k_overlap([0, 1, 2, 3, 4], [0, 4, 3, 2, 1], 0.2) == 1.0
    with pytest.raises(ContractError):
        dm.footrule([0, 1], [0, 2])
    with pytest.raises(ContractError):
        dm.footrule([0, 0], [0, 0])


def test_monotone_delta_rankings_agree():
    rng = np.random.default_rng(2)
    v = rng.normal(size=20)
    ra, rb = dm.rank_by_magnitude(v), dm.rank_by_magnitude(3 * v)
    assert dm.footrule(ra, rb) == 0 and dm.top_k_overlap(ra, rb) == 1.0


def test_score_table_roundtrip():
    t = ScoreTable()
    t.put(1, 0, "unrolled", "mean", 0.1 + 0.2)
    t.put(0, 1, "retrain", "variance", -1e-17)
    t.put(0, 0, "retrain", "variance", 3.0)
    text = t.to_csv()
    assert text.splitlines()[0] == "subset_id,query_id,method,delta,value"
    back = ScoreTable.from_csv(text)
    assert back.to_csv() == text and back.rows() == t.rows()
    assert back.rows()[-1].value == 0.1 + 0.2
    subs, qs, M = t.matrix("retrain", "variance")
    assert subs == [0] and qs == [0, 1] and M.tolist() == [[3.0, -1e-17]]
    with pytest.raises(ContractError):
        t.put(1, 0, "unrolled", "mean", 1.0)
    with pytest.raises(ContractError):
        t.put(1, 0, "unrolled", "median", 1.0)
    with pytest.raises(ContractError):
        ScoreTable.from_csv("a,b\n")
