"""Command-line entry point: ``dattr <command> --manifest m.json [--set k=v] [--out dir]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dattr import dataio, harness, influence, numcore, trainer, unrolled
from dattr import distmetrics as dm

COMMANDS = ("train", "attribute", "retrain", "lds", "loo", "theory2", "boltzmann", "ranks", "report")
FORMATS = ("csv", "json", "svg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dattr", description="Distributional training data attribution experiments.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--manifest", required=name != "report", help="experiment manifest (JSON)")
        c.add_argument("--out", default=None, help="output directory (default: manifest output_dir)")
        c.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted manifest override, repeatable")
        c.add_argument("--format", dest="formats", action="append", choices=FORMATS, default=None,
                       help="report format, repeatable (default: csv and json)")
        if name == "ranks":
            c.add_argument("--scores", default=None, help="existing score table CSV to rank instead of retraining")
            c.add_argument("--k-frac", type=float, default=0.1)
    return p


def _parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        out[key.strip()] = val
    return out


# Report emission ---------------------------------------------------------------


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def summary_rows(summary: dict) -> tuple[list[str], list[list]]:
    """Flat table for a summary; one row per (method, delta) for LDS."""
    kind = summary.get("experiment")
    if kind == "lds":
        rows = []
        for method in sorted(summary["lds"]):
            for dk in sorted(summary["lds"][method]):
                rows.append([method, dk, summary["lds"][method][dk], summary["null_p95"].get(method, {}).get(dk)])
        return ["method", "delta", "lds", "null_p95"], rows
    if kind == "loo":
        return ["seeds", "corr"], [[p["seeds"], p["corr"]] for p in summary["curve"]]
    if kind == "theorem2":
        keys = ["t", "corr", "nullspace_fraction", "response_null_max", "grad_null_max",
                "if_gap_max_abs", "if_scale_max_abs"]
        return keys, [[p.get(k) for k in keys] for p in summary["points"]]
    if kind == "ranks":
        return (["pair", "footrule", "overlap", "footrule_max"],
                [[k, v["footrule"], v["overlap"], v["footrule_max"]] for k, v in sorted(summary["pairs"].items())])
    if kind == "boltzmann":
        keys = ["w2_transported", "w2_identity", "w2_misscaled", "n_samples"]
        return ["case"] + keys, [[c] + [summary[c][k] for k in keys] for c in ("gaussian", "circle")]
    if kind in ("train", "retrain", "attribute"):
        return summary["table_header"], summary["table"]
    raise harness.ExperimentError(f"no tabular layout for experiment {kind!r}")


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    if ticks[0] > lo:
        ticks.insert(0, round(ticks[0] - step, 12))
    if ticks[-1] < hi:
        ticks.append(round(ticks[-1] + step, 12))
    return ticks


_W, _H, _M = 640, 400, 60
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_svg(title: str, series: Sequence[tuple[str, Sequence, Sequence]], xlabel: str = "",
               ylabel: str = "", scatter: bool = False) -> str:
    """Line (or scatter) chart on a fixed canvas; empty input gets axes and a 'no data' note."""
    pts = [(float(x), float(y)) for _, xs, ys in series for x, y in zip(xs, ys)
           if x is not None and y is not None and math.isfinite(x) and math.isfinite(y)]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W // 2}" y="24" text-anchor="middle" font-size="15">{title}</text>']
    x0, x1, y0, y1 = _M, _W - _M // 2, _H - _M, _M // 1.5
    if pts:
        xt = _nice_ticks(min(p[0] for p in pts), max(p[0] for p in pts))
        yt = _nice_ticks(min(p[1] for p in pts), max(p[1] for p in pts))
    else:
        xt, yt = [0.0, 0.5, 1.0], [0.0, 0.5, 1.0]

    def sx(v):
        return x0 + (v - xt[0]) / (xt[-1] - xt[0]) * (x1 - x0)

    def sy(v):
        return y0 - (v - yt[0]) / (yt[-1] - yt[0]) * (y0 - y1)

    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1:.1f}" stroke="black"/>')
    for v in xt:
        out.append(f'<line x1="{sx(v):.2f}" y1="{y0}" x2="{sx(v):.2f}" y2="{y0 + 5}" stroke="black"/>'
                   f'<text x="{sx(v):.2f}" y="{y0 + 18}" text-anchor="middle" font-size="11">{v:g}</text>')
    for v in yt:
        out.append(f'<line x1="{x0 - 5}" y1="{sy(v):.2f}" x2="{x0}" y2="{sy(v):.2f}" stroke="black"/>'
                   f'<text x="{x0 - 8}" y="{sy(v) + 4:.2f}" text-anchor="end" font-size="11">{v:g}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{_H - 18}" text-anchor="middle" font-size="12">{xlabel}</text>')
    out.append(f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">{ylabel}</text>')
    if not pts:
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
                   f'font-size="14" fill="gray">no data</text>')
    for i, (label, xs, ys) in enumerate(series):
        col = _COLORS[i % len(_COLORS)]
        xy = [(sx(float(x)), sy(float(y))) for x, y in zip(xs, ys)
              if x is not None and y is not None and math.isfinite(x) and math.isfinite(y)]
        if not xy:
            continue
        if scatter:
            out += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="{col}"/>' for a, b in xy]
        else:
            path = " ".join(f"{a:.2f},{b:.2f}" for a, b in xy)
            out.append(f'<polyline points="{path}" fill="none" stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{x1 - 4}" y="{y1 + 14 * (i + 1):.1f}" text-anchor="end" font-size="11" '
                   f'fill="{col}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _charts(summary: dict) -> dict[str, str]:
    kind = summary.get("experiment")
    if kind == "theorem2":
        pts = summary["points"]
        ts = [p["t"] for p in pts]
        return {"corr": render_svg("IF vs unrolled correlation", [("corr", ts, [p["corr"] for p in pts])],
                                   "iteration", "Pearson correlation"),
                "nullspace": render_svg("Nullspace fraction of grad m",
                                        [("fraction", ts, [p["nullspace_fraction"] for p in pts])],
                                        "iteration", "fraction")}
    if kind == "loo":
        c = summary["curve"]
        sc = summary.get("scatter", {})
        return {"curve": render_svg("LOO correlation vs seeds", [("corr", [p["seeds"] for p in c],
                                                                  [p["corr"] for p in c])], "seeds", "correlation"),
                "scatter": render_svg("Predicted vs true mean", [("query 0", sc.get("true_mean", []),
                                                                 sc.get("pred_mean", []))],
                                      "true mean", "predicted mean", scatter=True)}
    if kind == "lds":
        series = []
        deltas = list(dm.DELTA_KINDS)
        for method in sorted(summary["lds"]):
            series.append((method, list(range(len(deltas))), [summary["lds"][method].get(d) for d in deltas]))
        return {"lds": render_svg("LDS per delta (0=mean, 1=variance, 2=wasserstein)", series, "delta", "LDS",
                                  scatter=True)}
    return {}


def emit_report(summary: dict, formats: Sequence[str], out_dir, stem: str) -> list[Path]:
    """Write ``stem.json``/``stem.csv``/``stem-*.svg``; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in sorted(set(formats)):
        if fmt == "json":
            p = out_dir / f"{stem}.json"
            p.write_text(dump_json(summary))
            written.append(p)
        elif fmt == "csv":
            header, rows = summary_rows(summary)
            p = out_dir / f"{stem}.csv"
            p.write_text(_csv_text(header, rows))
            written.append(p)
        elif fmt == "svg":
            for name, text in sorted(_charts(summary).items()):
                p = out_dir / f"{stem}-{name}.svg"
                p.write_text(text)
                written.append(p)
        else:
            raise UsageError(f"unknown format {fmt!r}")
    return written


# Commands ---------------------------------------------------------------------


def _subsets(manifest: harness.Manifest, n: int):
    s = manifest.subsets
    return dataio.make_removal_subsets(n, s.n, s.fraction, s.seed)


def cmd_train(manifest, out: Path, _args) -> tuple[dict, str]:
    prep = harness.prepare(manifest)
    runs = harness.base_ensemble(prep, cache_dir=out / "checkpoints")
    rows = [[r.seed, q, float(v)] for r in runs for q, v in enumerate(r.values)]
    s = {"experiment": "train", "setting": manifest.setting, "n_runs": len(runs), "n_train": prep.table.n,
         "config": prep.config.to_dict(), "table_header": ["seed", "query_id", "value"], "table": rows,
         "manifest": manifest.to_dict()}
    return s, f"trained {len(runs)} base runs on N={prep.table.n}"


def cmd_retrain(manifest, out: Path, _args) -> tuple[dict, str]:
    prep = harness.prepare(manifest)
    rows, div = [], 0
    for j, sub in enumerate(_subsets(manifest, prep.table.n)):
        ds = harness.retrain_distribution(prep, sub, j)
        div += ds.n_diverged
        for q, d in enumerate(ds.dists):
            rows += [[j, q, i, float(v)] for i, v in enumerate(d.samples)]
    s = {"experiment": "retrain", "setting": manifest.setting, "divergent_retrains": div,
         "table_header": ["subset_id", "query_id", "sample", "value"], "table": rows,
         "manifest": manifest.to_dict()}
    return s, f"retrained {manifest.subsets.n} subsets x {manifest.n_retrain_seeds} seeds ({div} divergent)"


def cmd_attribute(manifest, out: Path, _args) -> tuple[dict, str]:
    prep = harness.prepare(manifest)
    subsets = _subsets(manifest, prep.table.n)
    runs = harness.base_ensemble(prep)
    rows = []
    for method in manifest.methods:
        if method == "oracle":
            continue
        for r in runs:
            S = harness.predicted_shifts(prep, r, method, subsets)
            rows += [[method, r.seed, j, q, float(S[j, q])] for j in range(S.shape[0]) for q in range(S.shape[1])]
    s = {"experiment": "attribute", "setting": manifest.setting,
         "table_header": ["method", "seed", "subset_id", "query_id", "shift"], "table": rows,
         "manifest": manifest.to_dict()}
    return s, f"predicted shifts for {len(subsets)} subsets with {', '.join(manifest.methods)}"


def cmd_lds(manifest, out: Path, _args) -> tuple[dict, str]:
    res = harness.run_lds_experiment(manifest)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.csv").write_text(res.table.to_csv())
    vals = ", ".join(f"{m}/{d}={v:.3f}" if v is not None else f"{m}/{d}=undefined"
                     for m, per in sorted(res.summary["lds"].items()) for d, v in sorted(per.items()))
    return res.summary, f"lds: {vals}"


def cmd_loo(manifest, out: Path, _args) -> tuple[dict, str]:
    s = harness.run_loo_experiment(manifest)
    return s, "loo: " + ", ".join(f"s={p['seeds']} corr={p['corr']:.3f}" for p in s["curve"])


def cmd_theory2(manifest, out: Path, _args) -> tuple[dict, str]:
    s = harness.run_theorem2_experiment(manifest)
    last = s["points"][-1] if s["points"] else {}
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    return s, f"theory2: final corr={fmt(last.get('corr'))} nullspace_fraction={fmt(last.get('nullspace_fraction'))}"


def cmd_boltzmann(manifest, out: Path, _args) -> tuple[dict, str]:
    s = harness.run_boltzmann_experiment(manifest)
    g, c = s["gaussian"], s["circle"]
    return s, (f"boltzmann: gaussian {g['w2_transported']:.4g} vs {g['w2_identity']:.4g}, "
               f"circle {c['w2_transported']:.4g} vs {c['w2_identity']:.4g}")


def cmd_ranks(manifest, out: Path, args) -> tuple[dict, str]:
    table = None
    if args.scores:
        table = dm.ScoreTable.from_csv(Path(args.scores).read_text())
    s = harness.run_rank_comparison(manifest, table, args.k_frac)
    s["manifest"] = manifest.to_dict()
    return s, "ranks: " + ", ".join(f"{k} overlap={v['overlap']:.2f}" for k, v in sorted(s["pairs"].items()))


_STEMS = {"train": "train", "retrain": "retrain", "attribute": "attribute", "lds": "lds", "loo": "loo",
          "theory2": "theory2", "boltzmann": "boltzmann", "ranks": "ranks"}
_HANDLERS = {"train": cmd_train, "retrain": cmd_retrain, "attribute": cmd_attribute, "lds": cmd_lds,
             "loo": cmd_loo, "theory2": cmd_theory2, "boltzmann": cmd_boltzmann, "ranks": cmd_ranks}


def cmd_report(out: Path, formats) -> str:
    """Re-render every summary JSON in ``out``."""
    if not out.is_dir():
        raise UsageError(f"report directory {out} does not exist")
    n = 0
    for p in sorted(out.glob("*.json")):
        summary = json.loads(p.read_text())
        if not isinstance(summary, dict) or "experiment" not in summary:
            continue
        emit_report(summary, formats, out, p.stem)
        n += 1
    return f"report: rendered {n} summaries in {out}"


_EXPERIMENT_ERRORS = (harness.ExperimentError, numcore.NumericFailure, numcore.CapacityError,
                      numcore.DegenerateSpectrum, trainer.DivergenceError, unrolled.ResponseDivergence,
                      influence.CalibrationError, dm.UndefinedCorrelation, dataio.IngestionError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
        formats = args.formats or ["csv", "json"]
        if args.command == "report":
            out = Path(args.out or (harness.load_manifest(args.manifest).output_dir if args.manifest else "out"))
            print(cmd_report(out, formats))
            return 0
        if not Path(args.manifest).is_file():
            raise UsageError(f"manifest {args.manifest} does not exist")
        manifest = harness.load_manifest(args.manifest)
        overrides = _parse_overrides(args.overrides)
        if overrides:
            manifest = manifest.with_overrides(overrides)
        out = Path(args.out or manifest.output_dir)
    except UsageError as exc:
        print(f"usage error: {exc}")
        return 1
    except numcore.ContractError as exc:
        print(f"manifest error: {exc}")
        return 1
    try:
        summary, line = _HANDLERS[args.command](manifest, out, args)
        emit_report(summary, formats, out, _STEMS[args.command])
    except numcore.ContractError as exc:
        print(f"manifest error: {exc}")
        return 1
    except _EXPERIMENT_ERRORS as exc:
        print(f"experiment error: {type(exc).__name__}: {exc}")
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}")
        return 2
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
