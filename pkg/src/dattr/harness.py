"""Experiment orchestration: ensembles, predicted distributions and the validation protocols."""

from __future__ import annotations

import dataclasses
import functools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from dattr import dataio, distmetrics as dm, influence, numcore, trainer, unrolled
from dattr import modelzoo as mz
from dattr.dataio import DatasetTable, RemovalGroup
from dattr.numcore import ContractError
from dattr.trainer import DivergenceError, TrainConfig

SETTINGS = ("concrete-mlp", "concrete-tiny-mlp", "mnist-mlp", "quadratic-fixture", "glm-fixture")
METHODS = ("unrolled", "if-exact", "if-blockdiag", "oracle")


class ExperimentError(RuntimeError):
    pass


class StepSizeError(ExperimentError):
    pass


# Manifest -------------------------------------------------------------------


def _strict(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ContractError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ContractError(f"unknown field {where}.{unknown[0]}")
    return cls(**d)


@dataclass(frozen=True)
class DataSpec:
    path: Optional[str] = None
    standardize: bool = True
    n_train: Optional[int] = None
    n_queries: int = 10
    select_seed: int = 0
    # synthetic fixtures
    n_examples: int = 40
    dim: int = 3
    rank: Optional[int] = None
    noise: float = 0.3


@dataclass(frozen=True)
class SubsetSpec:
    n: int = 20
    fraction: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class QuerySpec:
    kind: str = "model-output-at-query"
    output_index: int = 0


@dataclass(frozen=True)
class LooSpec:
    seed_grid: tuple = (5, 20, 80)
    n_groups: Optional[int] = None


@dataclass(frozen=True)
class Theorem2Spec:
    n_groups: int = 50
    group_seed: int = 0
    n_checkpoints: int = 10
    query: int = 0
    lr_decay_power: float = 0.0
    lr_decay_scale: float = 0.1


@dataclass(frozen=True)
class BoltzmannSpec:
    beta: float = 100.0
    eps: float = 0.1
    lam: float = 1.0
    g: float = 1.0
    step_size: float = 0.005
    n_chains: int = 100
    n_steps: int = 300
    burn_in: int = 200
    seed: int = 0
    n_projections: int = 64
    rel_tol: float = 1e-4


@dataclass(frozen=True)
class Manifest:
    setting: str
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    data: DataSpec = DataSpec()
    base_seed: int = 0
    n_base_seeds: int = 20
    n_retrain_seeds: int = 20
    subsets: SubsetSpec = SubsetSpec()
    methods: tuple = ("unrolled", "if-exact")
    deltas: tuple = dm.DELTA_KINDS
    queries: QuerySpec = QuerySpec()
    loo: LooSpec = LooSpec()
    theorem2: Theorem2Spec = Theorem2Spec()
    boltzmann: BoltzmannSpec = BoltzmannSpec()
    null_shuffles: int = 200
    output_dir: str = "out"

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ContractError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        for m in self.methods:
            if m not in METHODS:
                raise ContractError(f"unknown method {m!r}")
        for dk in self.deltas:
            if dk not in dm.DELTA_KINDS:
                raise ContractError(f"unknown delta kind {dk!r}")
        if self.n_base_seeds < 1 or self.n_retrain_seeds < 1:
            raise ContractError("seed counts must be >= 1")
        unknown = set(self.train) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown field train.{sorted(unknown)[0]}")
        unknown = set(self.model) - {"hidden"}
        if unknown:
            raise ContractError(f"unknown field model.{sorted(unknown)[0]}")

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        if not isinstance(d, dict):
            raise ContractError("manifest must be a JSON object")
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ContractError(f"unknown field {unknown[0]}")
        if "setting" not in d:
            raise ContractError("manifest needs a setting")
        nested = {"data": DataSpec, "subsets": SubsetSpec, "queries": QuerySpec, "loo": LooSpec,
                  "theorem2": Theorem2Spec, "boltzmann": BoltzmannSpec}
        for key, sub in nested.items():
            if key in d:
                d[key] = _strict(sub, d[key], key)
        if "loo" in d:
            d["loo"] = dataclasses.replace(d["loo"], seed_grid=tuple(int(s) for s in d["loo"].seed_grid))
        for key in ("methods", "deltas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k in ("methods", "deltas"):
            out[k] = list(out[k])
        out["loo"]["seed_grid"] = list(out["loo"]["seed_grid"])
        return out

    def with_overrides(self, overrides: dict[str, str]) -> "Manifest":
        """Apply flat dotted ``key=value`` overrides; values are parsed as JSON when possible."""
        d = self.to_dict()
        for key, raw in overrides.items():
            try:
                val = json.loads(raw)
            except (json.JSONDecodeError, TypeError):
                val = raw
            parts = key.split(".")
            node = d
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    if p in ("train", "model") and p in node:
                        break
                    raise ContractError(f"unknown override path {key!r}")
                node = node[p]
            leaf = parts[-1]
            if leaf not in node and parts[0] not in ("train", "model"):
                raise ContractError(f"unknown override path {key!r}")
            node[leaf] = val
        return Manifest.from_dict(d)


def load_manifest(path) -> Manifest:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON ({exc})") from None
    return Manifest.from_dict(d)


def workers() -> int:
    raw = os.environ.get("DATTR_WORKERS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def pmap(fn: Callable, items: Sequence) -> list:
    """Ordered parallel map over a bounded thread pool."""
    items = list(items)
    n = min(workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


# Experiment preparation ------------------------------------------------------

_DEFAULT_HIDDEN = {"concrete-mlp": (128, 128, 128), "concrete-tiny-mlp": (64, 64), "mnist-mlp": (512, 256, 128)}


def default_config(setting: str) -> TrainConfig:
    if setting.startswith("concrete"):
        return trainer.CONCRETE_CONFIG
    if setting == "mnist-mlp":
        return trainer.MNIST_CONFIG
    # synthetic fixtures: full batch (prepare sets B = N), vanilla gradient descent
    return TrainConfig(base_lr=0.1, momentum=0.0, weight_decay=0.0, clip_norm=None, iters=500,
                       batch_size=40, warmup_frac=0.0, batch_mode="iid")


@dataclass
class Prepared:
    manifest: Manifest
    spec: mz.ModelSpec
    table: DatasetTable
    config: TrainConfig
    queries: list[mz.MeasurementSpec]
    notes: dict


def _data_root() -> list[Path]:
    roots = []
    if os.environ.get("DATTR_DATA_DIR"):
        roots.append(Path(os.environ["DATTR_DATA_DIR"]))
    roots += [Path.cwd() / "data", Path(__file__).resolve().parents[2] / "data"]
    return roots


def _find(name: str, explicit: Optional[str]) -> Path:
    if explicit:
        if not Path(explicit).exists():
            raise ExperimentError(f"dataset file {explicit} not found")
        return Path(explicit)
    for root in _data_root():
        if (root / name).exists():
            return root / name
    raise ExperimentError(f"dataset file {name} not found; set DATTR_DATA_DIR or data.path")


def prepare(manifest: Manifest) -> Prepared:
    ds = manifest.data
    setting = manifest.setting
    notes: dict = {}
    if setting.startswith("concrete") or setting == "mnist-mlp":
        if setting == "mnist-mlp":
            root = _find("train-images-idx3-ubyte", ds.path and str(Path(ds.path) / "train-images-idx3-ubyte"))
            full = dataio.load_mnist(root, root.parent / "train-labels-idx1-ubyte")
        else:
            full = dataio.load_concrete(_find("concrete.csv", ds.path))
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([ds.select_seed, 11])))
        perm = rng.permutation(full.n)
        q_rows = perm[:ds.n_queries]
        rest = perm[ds.n_queries:]
        t_rows = np.sort(rest if ds.n_train is None else rest[:ds.n_train])
        table = full.take(t_rows)
        qX = full.features[q_rows]
        qy = full.targets[q_rows]
        if ds.standardize:
            table, stats = dataio.standardize(table)
            qX = stats.transform_features(qX)
            if table.task == "regression":
                qy = stats.transform_targets(qy)
            notes["standardized"] = True
        notes["train_rows"] = int(table.n)
        hidden = tuple(manifest.model.get("hidden", _DEFAULT_HIDDEN[setting]))
        out = 10 if setting == "mnist-mlp" else 1
        loss = "cross-entropy" if setting == "mnist-mlp" else "half-mse"
        spec: mz.ModelSpec = mz.MLPSpec((table.d_in,) + hidden + (out,), "gelu", loss)
    else:
        rank = ds.rank if setting == "glm-fixture" else None
        if setting == "glm-fixture" and rank is None:
            rank = max(1, ds.dim - 1)
        full = dataio.synthetic_regression(ds.n_examples + ds.n_queries, ds.dim, ds.select_seed,
                                           rank=rank, noise=ds.noise)
        table = full.take(np.arange(ds.n_queries, full.n))
        qX = full.features[:ds.n_queries]
        qy = full.targets[:ds.n_queries]
        spec = mz.GLMSpec(ds.dim)
    base = default_config(setting)
    if isinstance(spec, mz.GLMSpec):
        base = dataclasses.replace(base, batch_size=table.n)   # fixtures train full batch at any size
    config = TrainConfig.from_dict({**base.to_dict(), **manifest.train})
    if config.batch_size > table.n:
        raise ContractError(f"batch size {config.batch_size} exceeds N={table.n}")
    q = manifest.queries
    queries = []
    for x, y in zip(qX, qy):
        tgt = (int(y) if spec.loss_kind == "cross-entropy" else float(y)) if q.kind == "loss-at-query" else None
        queries.append(mz.MeasurementSpec(q.kind, tuple(x), tgt, q.output_index))
    return Prepared(manifest, spec, table, config, queries, notes)


def base_seeds(manifest: Manifest, n: Optional[int] = None) -> list[int]:
    return [dataio.derive_seed(manifest.base_seed, "base", None, i) for i in range(n or manifest.n_base_seeds)]


def retrain_seeds(manifest: Manifest, subset_id: int, n: Optional[int] = None) -> list[int]:
    return [dataio.derive_seed(manifest.base_seed, "retrain", subset_id, i)
            for i in range(n or manifest.n_retrain_seeds)]


def measure_all(prep: Prepared, theta) -> np.ndarray:
    """Measurements of every query at theta."""
    if all(q.kind == "model-output-at-query" for q in prep.queries):
        X = np.array([q.query for q in prep.queries])
        out = mz.forward(prep.spec, theta, X)
        return np.array([out[i, q.output_index] for i, q in enumerate(prep.queries)])
    return np.array([mz.measurement(q, prep.spec, theta) for q in prep.queries])


def measurement_grads(prep: Prepared, theta) -> np.ndarray:
    return np.array([mz.measurement_grad(q, prep.spec, theta) for q in prep.queries])


@dataclass
class RunRecord:
    seed: int
    subset_id: Optional[int]
    theta: Optional[np.ndarray]
    values: Optional[np.ndarray]
    diverged: bool = False


def _train_record(prep: Prepared, seed: int, subset_id: Optional[int], weights=None,
                  keep_theta: bool = True) -> RunRecord:
    try:
        theta = trainer.train_run(prep.spec, prep.table, prep.config, weights, seed)
    except DivergenceError:
        return RunRecord(seed, subset_id, None, None, True)
    return RunRecord(seed, subset_id, theta if keep_theta else None, measure_all(prep, theta))


def base_ensemble(prep: Prepared, n: Optional[int] = None, cache_dir: Optional[Path] = None) -> list[RunRecord]:
    """Full-data runs for the base seeds; divergent base runs are an error."""
    seeds = base_seeds(prep.manifest, n)

    def one(seed):
        path = None if cache_dir is None else Path(cache_dir) / f"base-{seed}.ckpt"
        if path is not None and path.exists():
            theta, meta = trainer.load_checkpoint(path, prep.spec)
            return RunRecord(seed, None, theta, measure_all(prep, theta))
        rec = _train_record(prep, seed, None)
        if rec.diverged:
            raise ExperimentError(f"base run with seed {seed} diverged")
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            trainer.save_checkpoint(path, prep.spec, rec.theta, prep.config.iters, seed)
        return rec

    return pmap(one, seeds)


@dataclass
class DistributionSet:
    dists: list[dm.EmpiricalDistribution]
    n_diverged: int = 0

    def samples(self) -> np.ndarray:
        return np.array([d.samples for d in self.dists])


def retrain_distribution(prep: Prepared, subset: RemovalGroup, subset_id: int,
                         n_seeds: Optional[int] = None) -> DistributionSet:
    """Retrain without the subset under independent retrain seeds; one distribution per query."""
    subset.check(prep.table.n)
    w = np.ones(prep.table.n)
    w[list(subset.indices)] = 0.0
    seeds = retrain_seeds(prep.manifest, subset_id, n_seeds)
    recs = pmap(lambda s: _train_record(prep, s, subset_id, w, keep_theta=False), seeds)
    good = [r.values for r in recs if not r.diverged]
    n_div = len(recs) - len(good)
    if n_div > 0.1 * len(recs):
        raise ExperimentError(f"{n_div}/{len(recs)} retrains diverged for subset {subset_id}")
    if not good:
        raise ExperimentError(f"every retrain diverged for subset {subset_id}")
    vals = np.array(good)
    return DistributionSet([dm.EmpiricalDistribution(vals[:, q], "retrained", q, subset_id)
                            for q in range(vals.shape[1])], n_div)


def predicted_shifts(prep: Prepared, base: RunRecord, method: str, groups: Sequence[RemovalGroup]) -> np.ndarray:
    """``grad m(theta_s) . r_s(G)`` as a ``(K, Q)`` array for one base run."""
    groups = list(groups)
    if method == "unrolled":
        rset = unrolled.unrolled_run(prep.spec, prep.table, prep.config, base.seed, groups)
        if not np.array_equal(rset.theta, base.theta):
            raise ExperimentError("unrolled trajectory does not reproduce the base run")
        R = rset.r_theta
    elif method in influence.METHOD_MODES:
        eng = influence.InfluenceEngine(prep.spec, prep.table, base.theta, influence.METHOD_MODES[method],
                                        prep.config.weight_decay)
        R = eng.responses(groups)
    else:
        raise ContractError(f"method {method!r} has no response model")
    return R @ measurement_grads(prep, base.theta).T


def predict_distribution(prep: Prepared, base_runs: Sequence[RunRecord], method: str,
                         subsets: Sequence[RemovalGroup]) -> list[list[dm.EmpiricalDistribution]]:
    """Predicted removal distributions ``m(theta_s) + grad m . r_s`` per subset, per query.

    Samples are paired with the base runs by seed.
    """
    subsets = list(subsets)
    shifts = pmap(lambda b: predicted_shifts(prep, b, method, subsets), base_runs)   # S x (K, Q)
    base_vals = np.array([b.values for b in base_runs])                                 # (S, Q)
    S = np.stack(shifts)                                                                # (S, K, Q)
    out = []
    for k in range(len(subsets)):
        vals = base_vals + S[:, k, :]
        out.append([dm.EmpiricalDistribution(vals[:, q], "predicted", q, k) for q in range(vals.shape[1])])
    return out


# LDS and rank comparison -------------------------------------------------------


@dataclass
class LdsResult:
    table: dm.ScoreTable
    summary: dict


def _delta_rows(table: dm.ScoreTable, method: str, subset_id: int, base: Sequence[dm.EmpiricalDistribution],
                other: Sequence[dm.EmpiricalDistribution], deltas: Sequence[str]) -> None:
    for q, (P, Q) in enumerate(zip(base, other)):
        for dk in deltas:
            table.put(subset_id, q, method, dk, dm.delta(dk, P, Q))


def shuffle_null(true_m: np.ndarray, pred_m: np.ndarray, n: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 13])))
    null = np.empty(n)
    for i in range(n):
        null[i] = dm.lds(true_m, pred_m[rng.permutation(pred_m.shape[0])])
    return null


def run_lds_experiment(manifest: Manifest, prep: Optional[Prepared] = None) -> LdsResult:
    prep = prep or prepare(manifest)
    subsets = dataio.make_removal_subsets(prep.table.n, manifest.subsets.n, manifest.subsets.fraction,
                                          manifest.subsets.seed)
    base_runs = base_ensemble(prep)
    base_d = [dm.EmpiricalDistribution(np.array([b.values[q] for b in base_runs]), "retrained", q)
              for q in range(len(prep.queries))]
    table = dm.ScoreTable()
    divergent = 0
    for j, sub in enumerate(subsets):
        ds = retrain_distribution(prep, sub, j)
        divergent += ds.n_diverged
        _delta_rows(table, "retrain", j, base_d, ds.dists, manifest.deltas)
    for method in manifest.methods:
        if method == "oracle":
            for r in [r for r in table.rows() if r.method == "retrain"]:
                table.put(r.subset_id, r.query_id, "oracle", r.delta, r.value)
            continue
        preds = predict_distribution(prep, base_runs, method, subsets)
        for j, per_q in enumerate(preds):
            _delta_rows(table, method, j, base_d, per_q, manifest.deltas)
    lds_vals: dict = {}
    null95: dict = {}
    for method in manifest.methods:
        lds_vals[method] = {}
        null95[method] = {}
        for dk in manifest.deltas:
            _, _, T = table.matrix("retrain", dk)
            _, _, P = table.matrix(method, dk)
            lds_vals[method][dk] = _maybe(lambda: dm.lds(T, P))
            if manifest.null_shuffles > 0:
                null = _maybe(lambda: shuffle_null(T, P, manifest.null_shuffles, manifest.base_seed))
                null95[method][dk] = None if null is None else float(np.percentile(null, 95))
    summary = {
        "experiment": "lds", "setting": manifest.setting,
        "n_subsets": len(subsets), "fraction": manifest.subsets.fraction,
        "n_base_seeds": manifest.n_base_seeds, "n_retrain_seeds": manifest.n_retrain_seeds,
        "n_queries": len(prep.queries), "n_train": prep.table.n,
        "lds": lds_vals, "null_p95": null95, "divergent_retrains": divergent,
        "manifest": manifest.to_dict(),
    }
    return LdsResult(table, summary)


def _maybe(fn):
    try:
        return fn()
    except dm.UndefinedCorrelation:
        return None


def run_rank_comparison(manifest: Manifest, table: Optional[dm.ScoreTable] = None, k_frac: float = 0.1) -> dict:
    """Footrule and top-k overlap between delta-kind rankings of the true influences."""
    if table is None:
        table = run_lds_experiment(dataclasses.replace(manifest, methods=(), deltas=dm.DELTA_KINDS)).table
    mats = {}
    for dk in dm.DELTA_KINDS:
        subs, qs, M = table.matrix("retrain", dk)
        if M.size == 0:
            raise ExperimentError(f"no true {dk} influences in the score table")
        mats[dk] = (subs, M)
    pairs = [("mean", "wasserstein"), ("mean", "variance"), ("variance", "wasserstein")]
    out = {}
    n_q = mats["mean"][1].shape[1]
    for a, b in pairs:
        foot, over = [], []
        for q in range(n_q):
            ra = dm.rank_by_magnitude(mats[a][1][:, q], mats[a][0])
            rb = dm.rank_by_magnitude(mats[b][1][:, q], mats[b][0])
            foot.append(dm.footrule(ra, rb))
            over.append(dm.top_k_overlap(ra, rb, k_frac))
        n = len(mats[a][0])
        out[f"{a}-vs-{b}"] = {"footrule": float(np.mean(foot)), "overlap": float(np.mean(over)),
                              "footrule_max": n * n // 2}
    return {"experiment": "ranks", "setting": manifest.setting, "k_frac": k_frac, "pairs": out,
            "n_queries": n_q}


# Leave-one-out -----------------------------------------------------------------


def run_loo_experiment(manifest: Manifest, prep: Optional[Prepared] = None) -> dict:
    """Correlation of true vs predicted per-example mean measurements against seed count."""
    prep = prep or prepare(manifest)
    grid = sorted(int(s) for s in manifest.loo.seed_grid)
    s_max = grid[-1]
    n_groups = prep.table.n if manifest.loo.n_groups is None else manifest.loo.n_groups
    groups = dataio.singleton_groups(range(n_groups))
    method = manifest.methods[0] if manifest.methods else "unrolled"
    base_runs = base_ensemble(prep, s_max)
    # predicted samples stay in seed order so that "first s seeds" is well defined
    base_vals = np.array([b.values for b in base_runs])                               # (S, Q)
    pred_shift = np.stack(pmap(lambda b: predicted_shifts(prep, b, method, groups), base_runs))
    pred = base_vals[:, None, :] + pred_shift                                          # (S, K, Q)
    true = np.empty((s_max, n_groups, len(prep.queries)))
    diverged = 0
    for k, g in enumerate(groups):
        ds = retrain_distribution_raw(prep, g, k, s_max)
        true[:, k, :] = ds[0]
        diverged += ds[1]
    curve = []
    for s in grid:
        tm = true[:s].mean(axis=0)       # (K, Q)
        pm = pred[:s].mean(axis=0)
        corrs = [dm.pearson(tm[:, q], pm[:, q]) for q in range(tm.shape[1])]
        curve.append({"seeds": s, "corr": float(np.mean(corrs)), "per_query": corrs})
    return {"experiment": "loo", "setting": manifest.setting, "method": method, "n_groups": n_groups,
            "n_train": prep.table.n, "curve": curve, "divergent_retrains": diverged,
            "scatter": {"true_mean": true.mean(axis=0)[:, 0].tolist(),
                        "pred_mean": pred.mean(axis=0)[:, 0].tolist(),
                        "base_mean": float(base_vals[:, 0].mean())},
            "manifest": manifest.to_dict()}


def retrain_distribution_raw(prep: Prepared, subset: RemovalGroup, subset_id: int,
                             n_seeds: int) -> tuple[np.ndarray, int]:
    """Retrain measurements in seed order, ``(n_seeds, Q)``; divergent runs replaced by the next seeds."""
    w = np.ones(prep.table.n)
    w[list(subset.indices)] = 0.0
    seeds = retrain_seeds(prep.manifest, subset_id, n_seeds)
    recs = pmap(lambda s: _train_record(prep, s, subset_id, w, keep_theta=False), seeds)
    vals = [r.values for r in recs if not r.diverged]
    n_div = len(recs) - len(vals)
    if n_div > 0.1 * len(recs):
        raise ExperimentError(f"{n_div}/{len(recs)} retrains diverged for subset {subset_id}")
    extra = n_seeds
    while len(vals) < n_seeds:
        s = dataio.derive_seed(prep.manifest.base_seed, "retrain", subset_id, extra)
        extra += 1
        r = _train_record(prep, s, subset_id, w, keep_theta=False)
        if not r.diverged:
            vals.append(r.values)
    return np.array(vals), n_div


# Theorem-2 curves ---------------------------------------------------------------


def checkpoint_grid(iters: int, n: int) -> list[int]:
    return sorted({dataio.round_half_up(iters * i / n) for i in range(n + 1)})


def decayed_lrs(config: TrainConfig, power: float, scale: float) -> Optional[np.ndarray]:
    """Warmup schedule times ``(1 + scale * t)^-power``; None when ``power == 0``."""
    if power == 0:
        return None
    t = np.arange(config.iters, dtype=np.float64)
    return trainer.lr_schedule(config) * (1.0 + scale * t) ** (-power)


def _null_fraction(decomp, rel_tol: float, v: np.ndarray) -> Optional[float]:
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return None
    _, v_null = numcore.span_projection(decomp, rel_tol, v)
    return float(np.linalg.norm(v_null)) / nv


def run_theorem2_experiment(manifest: Manifest, prep: Optional[Prepared] = None) -> dict:
    """Unrolled vs influence-function shift predictions along one training run.

    At each checkpoint ``t`` the influence function is evaluated at the current
    weights ``theta_t``; ``corr`` is the Pearson correlation across groups of the
    two predicted measurement shifts.
    """
    prep = prep or prepare(manifest)
    spec_t2 = manifest.theorem2
    cfg = prep.config
    n_groups = min(spec_t2.n_groups, prep.table.n)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec_t2.group_seed, 17])))
    ids = np.sort(rng.choice(prep.table.n, n_groups, replace=False))
    groups = dataio.singleton_groups(ids)
    marks = set(checkpoint_grid(cfg.iters, spec_t2.n_checkpoints))
    lrs = decayed_lrs(cfg, spec_t2.lr_decay_power, spec_t2.lr_decay_scale)
    seed = base_seeds(manifest, 1)[0]
    query = prep.queries[spec_t2.query]
    mode = influence.HessianMode("exact")
    points = []

    def hook(t, theta, rstate):
        if t not in marks:
            return
        eng = influence.InfluenceEngine(prep.spec, prep.table, theta, mode, cfg.weight_decay)
        r_if = eng.responses(groups)
        gm = mz.measurement_grad(query, prep.spec, theta)
        u = rstate.r_theta @ gm
        v = r_if @ gm
        decomp = eng.decomps[0]
        resp_null = [_null_fraction(decomp, mode.rel_tol, r) for r in rstate.r_theta]
        grad_null = [_null_fraction(decomp, mode.rel_tol, g) for g in eng.example_grads(ids)]
        gap = float(np.max(np.abs(rstate.r_theta - r_if)))
        points.append({
            "t": int(t),
            "corr": _maybe(lambda: dm.pearson(u, v)),
            "nullspace_fraction": _null_fraction(decomp, mode.rel_tol, gm),
            "response_null_max": max((x for x in resp_null if x is not None), default=None),
            "grad_null_max": max((x for x in grad_null if x is not None), default=None),
            "if_gap_max_abs": gap,
            "if_scale_max_abs": float(np.max(np.abs(r_if))),
        })

    rset = unrolled.unrolled_run(prep.spec, prep.table, cfg, seed, groups, hook, lr_override=lrs)
    return {"experiment": "theorem2", "setting": manifest.setting, "seed": seed, "group_ids": ids.tolist(),
            "iters": cfg.iters, "points": points, "final_theta_norm": float(np.linalg.norm(rset.theta)),
            "manifest": manifest.to_dict()}


# Boltzmann transport --------------------------------------------------------------


@dataclass
class MalaResult:
    samples: np.ndarray
    acceptance: float


@functools.lru_cache(maxsize=64)
def _mala_ops(energy):
    vg = jax.jit(jax.vmap(jax.value_and_grad(energy)))
    return vg


def langevin_sample(energy: Callable, beta: float, step_size: float, n_steps: int, n_chains: int,
                    burn_in: int, seed: int, init=None, dim: int = 1) -> MalaResult:
    """Metropolis-adjusted Langevin chains targeting ``exp(-beta * energy)``.

    Returns the post-burn-in states of all chains stacked as ``(n_chains * kept, d)``.
    """
    if not beta > 0 or not step_size > 0:
        raise ContractError("beta and step_size must be positive")
    if not 0 <= burn_in < n_steps:
        raise ContractError("need 0 <= burn_in < n_steps")
    x = np.zeros((n_chains, dim)) if init is None else np.array(init, dtype=np.float64).reshape(n_chains, -1)
    vg = _mala_ops(energy)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 23])))
    e, g = (np.asarray(a) for a in vg(jnp.asarray(x)))
    kept = []
    accepted = 0
    sd = math.sqrt(2.0 * step_size)
    for t in range(n_steps):
        mean_fwd = x - step_size * beta * g
        y = mean_fwd + sd * rng.standard_normal(x.shape)
        ey, gy = (np.asarray(a) for a in vg(jnp.asarray(y)))
        mean_bwd = y - step_size * beta * gy
        log_q_fwd = -np.sum((y - mean_fwd) ** 2, axis=1) / (4 * step_size)
        log_q_bwd = -np.sum((x - mean_bwd) ** 2, axis=1) / (4 * step_size)
        log_a = -beta * (ey - e) + log_q_bwd - log_q_fwd
        acc = np.log(rng.uniform(size=n_chains)) < log_a
        x = np.where(acc[:, None], y, x)
        e = np.where(acc, ey, e)
        g = np.where(acc[:, None], gy, g)
        if t >= burn_in:
            accepted += int(acc.sum())
            kept.append(x.copy())
    rate = accepted / (n_chains * (n_steps - burn_in))
    if rate < 0.05:
        raise StepSizeError(f"MALA acceptance {rate:.3f} below 5%; reduce step_size")
    return MalaResult(np.concatenate(kept, axis=0), rate)


def sliced_w2(A: np.ndarray, B: np.ndarray, n_projections: int = 64, seed: int = 0) -> float:
    """W2 per coordinate for 1-D samples; root-mean-square of projected W2 otherwise."""
    A = np.asarray(A, dtype=np.float64).reshape(len(A), -1)
    B = np.asarray(B, dtype=np.float64).reshape(len(B), -1)
    if A.shape[1] == 1:
        return dm.wasserstein2(A[:, 0], B[:, 0])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 19])))
    dirs = rng.standard_normal((n_projections, A.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(math.sqrt(np.mean([dm.wasserstein2(A @ u, B @ u) ** 2 for u in dirs])))


def transport_map(L: Callable, ell: Callable, samples: np.ndarray, eps: float, rel_tol: float = 1e-4,
                  scale: float = 1.0) -> np.ndarray:
    """``theta + scale * eps * pinv(grad^2 L(theta)) grad ell(theta)`` for each sample row."""
    H = np.asarray(jax.jit(jax.vmap(jax.hessian(L)))(jnp.asarray(samples)))
    G = np.asarray(jax.jit(jax.vmap(jax.grad(ell)))(jnp.asarray(samples)))
    out = np.empty_like(samples)
    for i in range(samples.shape[0]):
        decomp = numcore.eig_decompose(H[i])
        out[i] = samples[i] + scale * eps * numcore.pinv_apply(decomp, rel_tol, 0.0, G[i])
    return out


def transport_check(L: Callable, ell: Callable, eps: float, beta: float, sampler: dict, *, dim: int = 1,
                    init=None, rel_tol: float = 1e-4, n_projections: int = 64, proj_seed: int = 0) -> dict:
    """Compare ``W2(T_eps # P_0, P_eps)`` with ``W2(P_0, P_eps)`` on MALA samples."""
    cfg = dict(sampler)
    base = langevin_sample(L, beta, dim=dim, init=init, **cfg)
    perturbed_energy = _perturbed(L, ell, float(eps))
    pert = langevin_sample(perturbed_energy, beta, dim=dim, init=init, **cfg)
    P0, Pe = base.samples, pert.samples
    moved = P0 if eps == 0 else transport_map(L, ell, P0, eps, rel_tol)
    twice = P0 if eps == 0 else transport_map(L, ell, P0, eps, rel_tol, scale=2.0)
    return {
        "w2_transported": sliced_w2(moved, Pe, n_projections, proj_seed),
        "w2_identity": sliced_w2(P0, Pe, n_projections, proj_seed),
        "w2_misscaled": sliced_w2(twice, Pe, n_projections, proj_seed),
        "acceptance": [base.acceptance, pert.acceptance],
        "n_samples": int(P0.shape[0]),
    }


@functools.lru_cache(maxsize=64)
def _perturbed(L, ell, eps):
    return lambda th: L(th) - eps * ell(th)


def gaussian_case(lam: float = 1.0, g: float = 1.0):
    return (lambda th: 0.5 * lam * jnp.sum(th ** 2)), (lambda th: g * jnp.sum(th))


def circle_case():
    return (lambda th: 0.5 * (jnp.sqrt(jnp.sum(th ** 2)) - 1.0) ** 2), (lambda th: 0.5 * jnp.sum(th ** 2))


_GAUSS = gaussian_case()
_CIRCLE = circle_case()


def run_boltzmann_experiment(manifest: Manifest) -> dict:
    b = manifest.boltzmann
    sampler = {"step_size": b.step_size, "n_steps": b.n_steps, "n_chains": b.n_chains,
               "burn_in": b.burn_in, "seed": b.seed}
    L, ell = _GAUSS if (b.lam, b.g) == (1.0, 1.0) else gaussian_case(b.lam, b.g)
    gauss = transport_check(L, ell, b.eps, b.beta, sampler, dim=1, rel_tol=b.rel_tol)
    gauss["analytic_mean_shift"] = b.eps * b.g / b.lam
    ang = 2 * np.pi * np.arange(b.n_chains) / b.n_chains
    init = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    Lc, ellc = _CIRCLE
    circ = transport_check(Lc, ellc, b.eps, b.beta, sampler, dim=2, init=init, rel_tol=b.rel_tol,
                           n_projections=b.n_projections, proj_seed=b.seed)
    return {"experiment": "boltzmann", "beta": b.beta, "eps": b.eps, "gaussian": gauss, "circle": circ,
            "manifest": manifest.to_dict()}
