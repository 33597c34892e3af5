import numpy as np
import pytest

from dattr import modelzoo as mz, trainer, unrolled
from dattr.dataio import RemovalGroup
from dattr.numcore import ContractError
from dattr.trainer import TrainConfig

from conftest import fd_response, rel_err, tiny_table

VANILLA = TrainConfig(base_lr=0.1, momentum=0.0, weight_decay=0.0, clip_norm=None, iters=10,
                      batch_size=4, warmup_frac=0.0, batch_mode="iid")


def test_theta_matches_train_run_bitwise(table, mlp):
    cfg = trainer.CONCRETE_CONFIG.with_(iters=30, batch_size=5)
    rset = unrolled.unrolled_run(mlp, table, cfg, 2, [RemovalGroup((1,)), RemovalGroup((0, 4))])
    np.testing.assert_array_equal(rset.theta, trainer.train_run(mlp, table, cfg, seed=2))


def test_recursion_equals_closed_form(table, mlp):
    for seed in range(3):
        traj, _ = unrolled.record_trajectory(mlp, table, VANILLA, seed)
        sched = trainer.make_schedule(table, VANILLA, seed)
        groups = [RemovalGroup((3,)), RemovalGroup((0, 5, 9))]
        rset = unrolled.unrolled_run(mlp, table, VANILLA, seed, groups)
        for g in groups:
            cf = unrolled.closed_form_response(mlp, table, traj, sched, g, trainer.lr_schedule(VANILLA), VANILLA)
            assert np.max(np.abs(cf - rset.response(g))) < 1e-10


def test_single_step_closed_form(table, mlp):
    cfg = VANILLA.with_(iters=1)
    sched = trainer.make_schedule(table, cfg, 0)
    k = int(sched.selections[0][0])
    theta0 = mz.init_params(mlp, 0)
    _, g, _ = mz.jax_loss_ops(mlp)
    Y = mz.encode_targets(mlp, table.targets)
    want = (cfg.base_lr / cfg.batch_size) * np.asarray(g(theta0, table.features[[k]], Y[[k]], np.ones(1)))
    rset = unrolled.unrolled_run(mlp, table, cfg, 0, [RemovalGroup((k,))])
    np.testing.assert_allclose(rset.r_theta[0], want, atol=1e-14)
    cf = unrolled.closed_form_response(mlp, table, theta0[None], sched, (k,), [cfg.base_lr], cfg)
    np.testing.assert_allclose(cf, want, atol=1e-14)


def test_closed_form_rejects_optimizer_features(table, mlp):
    with pytest.raises(ContractError):
        unrolled.closed_form_response(mlp, table, np.zeros((1, mz.n_params(mlp))),
                                      trainer.make_schedule(table, VANILLA, 0), (0,), [0.1],
                                      VANILLA.with_(momentum=0.5))


@pytest.mark.parametrize("mom,wd,clip", [(0.0, 0.0, None), (0.9, 0.0, None), (0.9, 1e-3, 1.0), (0.0, 1e-2, 0.05)])
def test_response_matches_retraining_difference(table, mlp, mom, wd, clip):
    cfg = trainer.CONCRETE_CONFIG.with_(iters=40, batch_size=4, momentum=mom, weight_decay=wd,
                                        clip_norm=clip, base_lr=0.05)
    group = (2, 6)
    rset = unrolled.unrolled_run(mlp, table, cfg, 1, [RemovalGroup(group)])
    assert rel_err(rset.r_theta[0], fd_response(mlp, table, cfg, 1, group)) < 1e-3


def test_null_group_and_unvisited_group(table, mlp):
    cfg = VANILLA.with_(iters=5)
    used = set(trainer.make_schedule(table, cfg, 0).selections.ravel().tolist())
    unseen = [i for i in range(table.n) if i not in used]
    groups = [RemovalGroup(())] + ([RemovalGroup((unseen[0],))] if unseen else [])
    rset = unrolled.unrolled_run(mlp, table, cfg, 0, groups)
    assert not rset.r_theta.any()


def test_hook_sees_every_step(table, mlp):
    cfg = VANILLA.with_(iters=6)
    seen = []
    unrolled.unrolled_run(mlp, table, cfg, 0, [(1,)], hooks=lambda t, th, rs: seen.append((t, rs.r_theta.copy())))
    assert [t for t, _ in seen] == list(range(7))
    assert not seen[0][1].any()


def test_linearity_over_groups(table, mlp):
    cfg = trainer.CONCRETE_CONFIG.with_(iters=20, batch_size=4)
    rset = unrolled.unrolled_run(mlp, table, cfg, 0, [(1,), (3,), (1, 3)])
    np.testing.assert_allclose(rset.response((1, 3)), rset.response((1,)) + rset.response((3,)), atol=1e-14)


def test_response_set_save_load(tmp_path, table, mlp):
    rset = unrolled.unrolled_run(mlp, table, VANILLA, 0, [(1,), (2, 4)])
    rset.save(tmp_path / "r.npz")
    back = unrolled.ResponseSet.load(tmp_path / "r.npz")
    np.testing.assert_array_equal(back.r_theta, rset.r_theta)
    assert back.groups == rset.groups and back.seed == 0 and back.meta == rset.meta
    with pytest.raises(ContractError):
        back.response((7,))


def test_prediction_helpers(table, mlp):
    rset = unrolled.unrolled_run(mlp, table, VANILLA, 0, [(1,)])
    pred = unrolled.predict_removed_params(rset.theta, rset, (1,))
    np.testing.assert_allclose(pred - rset.theta, rset.r_theta[0])
    m = mz.MeasurementSpec("model-output-at-query", (0.1, 0.2, 0.3))
    val = unrolled.predict_measurement(rset.theta, rset, (1,), m, mlp)
    lin = mz.measurement(m, mlp, rset.theta) + mz.measurement_grad(m, mlp, rset.theta) @ rset.r_theta[0]
    assert val == pytest.approx(lin)


def test_glm_response_converges_to_influence():
    table = tiny_table(30, 3, seed=4)
    spec = mz.GLMSpec(3)
    cfg = VANILLA.with_(iters=3000, batch_size=30, base_lr=0.2)
    rset = unrolled.unrolled_run(spec, table, cfg, 0, [(4,)])
    Xa = np.hstack([table.features, np.ones((30, 1))])
    H = Xa.T @ Xa / 30
    theta = rset.theta
    resid = Xa[4] @ theta - table.targets[4]
    want = np.linalg.solve(H, resid * Xa[4]) / 30
    np.testing.assert_allclose(rset.r_theta[0], want, atol=1e-10)
