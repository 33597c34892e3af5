import numpy as np
import pytest

from dattr import kernels, modelzoo as mz, trainer
from dattr.numcore import ContractError
from dattr.trainer import DivergenceError, OptimState, TrainConfig

VANILLA = TrainConfig(base_lr=0.05, momentum=0.0, weight_decay=0.0, clip_norm=None, iters=30,
                      batch_size=4, warmup_frac=0.0, batch_mode="iid")


def test_momentum_step_hand_arithmetic():
    cfg = TrainConfig(momentum=0.9, clip_norm=None)
    th, st = trainer.sgd_step(np.array([1.0]), OptimState(np.array([0.5])), np.array([1.0]), 0.1, cfg)
    assert st.velocity[0] == pytest.approx(1.45) and th[0] == pytest.approx(0.855)


def test_vanilla_step_and_clip():
    th, _ = trainer.sgd_step(np.array([1.0, 2.0]), OptimState.zeros(2), np.array([0.5, -1.0]), 0.1, VANILLA)
    np.testing.assert_allclose(th, [0.95, 2.1])
    cfg = VANILLA.with_(clip_norm=1.0)
    th, st = trainer.sgd_step(np.zeros(2), OptimState.zeros(2), np.array([30.0, 40.0]), 1.0, cfg)
    np.testing.assert_allclose(st.velocity, [0.6, 0.8])
    assert np.linalg.norm(th) == pytest.approx(1.0)


def test_warmup_schedule():
    cfg = TrainConfig(base_lr=0.03, iters=580, warmup_frac=0.1)
    assert trainer.warmup_iters(cfg) == 58
    assert trainer.lr_at(cfg, 0) == pytest.approx(0.03 / 58)
    assert trainer.lr_at(cfg, 57) == pytest.approx(0.03)
    lrs = trainer.lr_schedule(cfg)
    assert np.all(np.diff(lrs) >= 0) and lrs[-1] == 0.03
    np.testing.assert_allclose(lrs, [trainer.lr_at(cfg, t) for t in range(580)])
    with pytest.raises(ContractError):
        trainer.lr_at(cfg, 580)
    assert trainer.warmup_iters(cfg.with_(warmup_frac=0.0)) == 1


def test_config_validation_and_roundtrip():
    with pytest.raises(ContractError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ContractError):
        TrainConfig(clip_norm=0.0)
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"lr": 1})
    cfg = TrainConfig.from_dict(trainer.CONCRETE_CONFIG.to_dict())
    assert cfg == trainer.CONCRETE_CONFIG and cfg.digest() == trainer.CONCRETE_CONFIG.digest()
    assert (cfg.base_lr, cfg.momentum, cfg.clip_norm, cfg.weight_decay) == (0.03, 0.9, 1.0, 1e-5)


def test_batch_gradient_includes_weights_and_decay(table, mlp):
    theta = mz.init_params(mlp, 0)
    f, g, _ = mz.jax_loss_ops(mlp)
    w = np.linspace(0.1, 1.0, table.n)
    idx = np.array([0, 3, 5])
    Y = mz.encode_targets(mlp, table.targets)
    want = np.asarray(g(theta, table.features[idx], Y[idx], w[idx] / 3)) + 0.01 * theta
    np.testing.assert_allclose(trainer.batch_gradient(mlp, table, theta, idx, w, 0.01), want, atol=1e-13)


def test_train_run_deterministic_and_hook_path_identical(table, mlp):
    cfg = trainer.CONCRETE_CONFIG.with_(iters=25, batch_size=4)
    a = trainer.train_run(mlp, table, cfg, seed=3)
    b = trainer.train_run(mlp, table, cfg, seed=3)
    np.testing.assert_array_equal(a, b)
    seen = []
    c = trainer.train_run(mlp, table, cfg, seed=3, hooks=lambda t, th, st, idx: seen.append(t))
    np.testing.assert_array_equal(a, c)
    assert seen == list(range(25))
    assert not np.array_equal(a, trainer.train_run(mlp, table, cfg, seed=4))


def test_zero_weights_equal_removing_from_full_batch(table, mlp):
    cfg = VANILLA.with_(batch_size=table.n)
    w = np.ones(table.n)
    w[[2, 7]] = 0.0
    a = trainer.train_run(mlp, table, cfg, w, seed=1)
    # full-batch mean with zero weights == rescaled mean over the survivors
    keep = np.flatnonzero(w)
    sub = table.take(keep)
    cfg_sub = cfg.with_(batch_size=sub.n, base_lr=cfg.base_lr * sub.n / table.n)
    b = trainer.train_run(mlp, sub, cfg_sub, seed=1)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_training_decreases_loss(table, mlp):
    cfg = VANILLA.with_(iters=300, batch_size=table.n, base_lr=0.1)
    theta0 = mz.init_params(mlp, 0)
    theta = trainer.train_run(mlp, table, cfg, seed=0)
    assert trainer.training_loss(mlp, table, theta) < 0.5 * trainer.training_loss(mlp, table, theta0)


def test_divergence_is_reported(table, mlp):
    cfg = VANILLA.with_(base_lr=1e3, iters=200, momentum=0.9)
    with pytest.raises(DivergenceError) as info:
        trainer.train_run(mlp, table, cfg, seed=0)
    assert 0 <= info.value.iteration < 200


def test_contracts(table, mlp):
    with pytest.raises(ContractError):
        trainer.train_run(mlp, table, VANILLA, weights=np.ones(3))
    with pytest.raises(ContractError):
        trainer.train_run(mlp, table, VANILLA, weights=np.full(table.n, 2.0))
    with pytest.raises(ContractError):
        trainer.train_run(mlp, table, VANILLA.with_(loss_kind="cross-entropy"))
    with pytest.raises(ContractError):
        trainer.train_run(mlp, table, VANILLA, lr_override=np.ones(3))


def test_checkpoint_roundtrip(tmp_path, mlp):
    theta = mz.init_params(mlp, 5)
    p = tmp_path / "c.ckpt"
    trainer.save_checkpoint(p, mlp, theta, 17, 5)
    back, meta = trainer.load_checkpoint(p, mlp)
    np.testing.assert_array_equal(back, theta)
    assert meta["iteration"] == 17 and meta["seed"] == 5
    with pytest.raises(ContractError, match="different model"):
        trainer.load_checkpoint(p, mz.MLPSpec((3, 4, 1)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ContractError, match="truncated"):
        trainer.load_checkpoint(p)


def test_kernel_backend_does_not_change_training(table, mlp):
    if "c" not in kernels.available_backends():
        pytest.skip("compiled extension not built")
    cfg = trainer.CONCRETE_CONFIG.with_(iters=40, batch_size=5)
    sched = trainer.make_schedule(table, cfg, 0)
    outs = []
    for name in ("c", "python"):
        K = kernels.load_backend(name)
        th = mz.init_params(mlp, 0)
        v = np.zeros_like(th)
        K.train_loop(mz.dims_array(mlp), 0, th, v, np.ascontiguousarray(table.features),
                     mz.encode_targets(mlp, table.targets), sched.selections, np.ones(table.n),
                     trainer.lr_schedule(cfg), cfg.weight_decay, cfg.momentum, cfg.clip)
        outs.append(th)
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)
