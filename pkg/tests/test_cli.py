import json

import pytest

from dattr import cli

FIXTURE = {"setting": "quadratic-fixture", "n_base_seeds": 2, "n_retrain_seeds": 2,
           "subsets": {"n": 4, "fraction": 0.1, "seed": 0}, "data": {"n_queries": 2}, "null_shuffles": 10,
           "train": {"iters": 100}, "loo": {"seed_grid": [1, 2], "n_groups": 5},
           "theorem2": {"n_groups": 6, "n_checkpoints": 3},
           "boltzmann": {"n_chains": 20, "n_steps": 40, "burn_in": 30, "n_projections": 8}}


@pytest.fixture
def manifest(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps(FIXTURE))
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr().out


def test_usage_errors(capsys, manifest, tmp_path):
    code, out = run(capsys, "lds", "--manifest", manifest, "--frobnicate")
    assert code == 1 and "usage" in out
    code, out = run(capsys, "nonsense")
    assert code == 1 and "lds" in out
    code, out = run(capsys, "lds", "--manifest", tmp_path / "missing.json")
    assert code == 1
    code, out = run(capsys, "lds", "--manifest", manifest, "--set", "novalue")
    assert code == 1


def test_unknown_manifest_field_is_named(capsys, tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({**FIXTURE, "subsets": {"n": 2, "colour": "red"}}))
    code, out = run(capsys, "lds", "--manifest", p)
    assert code == 1 and "subsets.colour" in out


def test_experiment_error_exit_code(capsys, manifest, tmp_path):
    code, out = run(capsys, "train", "--manifest", manifest, "--set", "data.path=/nonexistent.csv",
                    "--set", "setting=\"concrete-tiny-mlp\"", "--out", tmp_path / "o")
    assert code == 2 and "experiment error" in out


def test_lds_outputs_and_determinism(capsys, manifest, tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        code, line = run(capsys, "lds", "--manifest", manifest, "--out", d, "--format", "csv",
                         "--format", "json", "--format", "svg")
        assert code == 0 and line.count("\n") == 1 and line.startswith("lds:")
        outs.append({p.name: p.read_bytes() for p in d.iterdir()})
    assert outs[0] == outs[1]
    assert {"scores.csv", "lds.csv", "lds.json", "lds-lds.svg"} <= set(outs[0])
    rows = outs[0]["lds.csv"].decode().splitlines()
    assert rows[0] == "method,delta,lds,null_p95" and len(rows) == 1 + 2 * 3


@pytest.mark.parametrize("cmd", ["train", "retrain", "attribute", "loo", "theory2", "boltzmann", "ranks"])
def test_every_command_is_deterministic(capsys, manifest, tmp_path, cmd):
    blobs = []
    for name in ("a", "b"):
        d = tmp_path / name
        code, line = run(capsys, cmd, "--manifest", manifest, "--out", d)
        assert code == 0, line
        blobs.append({p.name: p.read_bytes() for p in d.glob("*.*")})
    assert blobs[0] == blobs[1] and blobs[0]


def test_report_rerenders(capsys, manifest, tmp_path):
    d = tmp_path / "o"
    assert run(capsys, "theory2", "--manifest", manifest, "--out", d)[0] == 0
    code, line = run(capsys, "report", "--out", d, "--format", "svg")
    assert code == 0 and "1 summaries" in line
    assert (d / "theory2-corr.svg").read_text().startswith("<svg")


def test_overrides_apply(capsys, manifest, tmp_path):
    d = tmp_path / "o"
    code, _ = run(capsys, "theory2", "--manifest", manifest, "--out", d, "--set", "theorem2.n_checkpoints=2")
    assert code == 0
    summary = json.loads((d / "theory2.json").read_text())
    assert [p["t"] for p in summary["points"]] == [0, 50, 100]


def test_empty_curve_svg():
    svg = cli.render_svg("empty", [("corr", [], [])])
    assert "no data" in svg and "<line" in svg
    assert svg == cli.render_svg("empty", [("corr", [], [])])


def test_json_is_canonical():
    a = cli.dump_json({"b": 1, "a": [float("nan"), 0.1 + 0.2]})
    assert a == cli.dump_json({"a": [float("nan"), 0.1 + 0.2], "b": 1})
    assert json.loads(a) == {"a": [None, 0.30000000000000004], "b": 1}
