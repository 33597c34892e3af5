import numpy as np
import pytest

from dattr import dataio, modelzoo as mz


def tiny_table(n=12, d=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.sin(X @ rng.normal(size=d)) + 0.1 * rng.normal(size=n)
    return dataio.DatasetTable(X, y)


@pytest.fixture
def table():
    return tiny_table()


@pytest.fixture
def mlp():
    return mz.MLPSpec((3, 5, 4, 1))


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def fd_response(spec, table, config, seed, group, h=1e-4, **kw):
    """Removal response by retraining: ``[theta(w_G = 1 - h) - theta(w_G = 1)] / h``."""
    from dattr import trainer

    w = np.ones(table.n)
    base = trainer.train_run(spec, table, config, w, seed, **kw)
    w[list(group)] = 1.0 - h
    return (trainer.train_run(spec, table, config, w, seed, **kw) - base) / h


ACCEPTANCE: dict = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (title, bool(ok), detail)
    print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {title}: {detail}")
