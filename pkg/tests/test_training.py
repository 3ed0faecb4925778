import numpy as np
import pytest

from conftest import random_task
from faststi.data import synth_generate
from faststi.graph import graph_from_distances
from faststi.model import ModelConfig, init_params, load_checkpoint, loss_value, make_task
from faststi.training import (AdamW, MaskSpec, TrainConfig, TrainingError, diffuse, expected_block_fraction,
                              make_targets, train_loop, train_step)


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec(strategy="random")
    with pytest.raises(ValueError):
        MaskSpec(point_rate=1.5)
    with pytest.raises(ValueError):
        MaskSpec(min_steps=10, max_steps=5)


def test_no_targets_when_rates_are_zero():
    om = np.ones((50, 4), bool)
    for strategy in ("point", "block"):
        spec = MaskSpec(strategy=strategy, point_rate=0, block_base_rate=0, failure_prob=0)
        t, c = make_targets(None, om, spec)
        assert not t.any() and c.all()


def test_point_rate_one_targets_every_observed_entry():
    om = np.random.default_rng(0).random((30, 5)) < 0.8
    t, c = make_targets(None, om, MaskSpec(strategy="point", point_rate=1.0))
    assert np.array_equal(t, om) and not c.any()


def test_targets_only_from_observed():
    rng = np.random.default_rng(1)
    om = rng.random((3, 200, 6)) < 0.7
    for strategy in ("point", "block"):
        t, c = make_targets(None, om, MaskSpec(strategy=strategy, failure_prob=0.05), rng)
        assert not np.any(t & ~om)
        assert np.array_equal(c, om & ~t)


def naive_block_mask(n_steps, n_nodes, spec, rng):
    """Loop-based reference simulation of the block-failure process."""
    m = np.zeros((n_steps, n_nodes), bool)
    for n in range(n_nodes):
        for s in range(n_steps):
            if rng.random() < spec.block_base_rate:
                m[s, n] = True
        for s in range(n_steps):
            if rng.random() < spec.failure_prob:
                d = rng.integers(spec.min_steps, spec.max_steps + 1)
                m[s:s + d, n] = True
    return m


def test_block_fraction_matches_analytic_expectation():
    spec = MaskSpec()
    expected = expected_block_fraction(spec, 1000)
    # 1e6 node-steps: 1000 steps for each of 1000 nodes
    t, _ = make_targets(None, np.ones((1000, 1000), bool), spec, np.random.default_rng(2))
    assert abs(t.mean() - expected) < 0.01
    # the closed form agrees with an independent loop simulation (with a boosted failure rate)
    boosted = MaskSpec(failure_prob=0.02)
    sim = naive_block_mask(400, 150, boosted, np.random.default_rng(3)).mean()
    assert abs(sim - expected_block_fraction(boosted, 400)) < 0.01
    # far from the window start the overlap-adjusted rate is 1 - (1 - base)(1 - p)^E[d]
    d = np.arange(12, 49)
    stationary = 1 - (1 - 0.05) * np.prod([1 - 0.0015 * (d > lag).mean() for lag in range(48)])
    assert expected_block_fraction(spec, 10 ** 5) == pytest.approx(stationary, abs=1e-4)


def test_block_runs_are_contiguous_and_clipped():
    spec = MaskSpec(block_base_rate=0.0, failure_prob=0.01, min_steps=5, max_steps=5)
    t, _ = make_targets(None, np.ones((40, 200), bool), spec, np.random.default_rng(4))
    for n in range(200):
        col = t[:, n].astype(int)
        starts = np.flatnonzero(np.diff(np.concatenate([[0], col])) == 1)
        ends = np.flatnonzero(np.diff(np.concatenate([col, [0]])) == -1) + 1
        lengths = ends - starts
        # runs are 5 long unless merged with a neighbour or clipped at the window end
        assert np.all((lengths >= 5) | (ends == 40))


def test_adamw_zero_learning_rate_is_bit_identical():
    p = init_params(ModelConfig.desk(), seed=0)
    before = p.copy()
    grads = p.copy()
    opt = AdamW(lr=0.0, weight_decay=1e-6)
    opt.update(p, grads)
    assert all(np.array_equal(p[k], before[k]) for k in p)


def test_adamw_first_step_and_decay():
    from faststi.model import ModelParams
    p = ModelParams(w=np.array([1.0, -2.0]))
    g = ModelParams(w=np.array([0.5, -0.5]))
    AdamW(lr=0.1, weight_decay=0.01).update(p, g)
    # bias-corrected first step moves each weight by lr * sign(g), plus decoupled decay
    np.testing.assert_allclose(p["w"], [1.0 - 0.1 * (1 + 0.01), -2.0 + 0.1 * (1 + 0.02)], rtol=1e-6)


def test_loss_restricted_to_targets(path_graph, training):
    cfg = ModelConfig(residual_layers=1, residual_channels=8, attention_heads=2, time_embedding_dim=8)
    p = init_params(cfg, seed=5)
    rng = np.random.default_rng(6)
    task = random_task(rng, path_graph, L=5, batch=2, missing_rate=0.0)
    t = np.array([4, 20])
    noise = rng.standard_normal((2, 5, 3))
    base = loss_value(p, cfg, task, t, noise, task.observed, training.alpha_bars)
    x2 = np.where(task.target_mask, task.observed, task.observed + 7.0)
    noise2 = np.where(task.target_mask, noise, -noise)
    assert loss_value(p, cfg, task, t, noise2, x2, training.alpha_bars) == base


def test_zero_predictor_loss_is_noise_power(path_graph, training):
    cfg = ModelConfig(residual_layers=1, residual_channels=8, attention_heads=2, time_embedding_dim=8)
    p = init_params(cfg, seed=5)
    p["head.2.w"][...] = 0.0
    rng = np.random.default_rng(7)
    task = random_task(rng, path_graph, L=50, batch=40, target_rate=0.5)
    noise = rng.standard_normal(task.observed.shape)
    loss = loss_value(p, cfg, task, rng.integers(0, 50, 40), noise, task.observed, training.alpha_bars)
    assert loss == pytest.approx(np.mean(noise[task.target_mask] ** 2), rel=1e-12)
    assert loss == pytest.approx(1.0, abs=0.05)


def test_diffuse_endpoints():
    rng = np.random.default_rng(8)
    x0 = np.full((10000, 1), 2.0)
    noise = rng.standard_normal(x0.shape)
    near_clean = diffuse(x0, noise, np.zeros(10000, int), np.array([1 - 1e-12, 0.5]))
    np.testing.assert_allclose(near_clean, x0, atol=1e-5)
    pure = diffuse(x0, noise, np.ones(10000, int), np.array([0.9, 1e-12]))
    assert abs(pure.mean()) < 0.05 and abs(pure.std() - 1) < 0.05


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_step_rejects_non_finite(path_graph, training):
    cfg = ModelConfig(residual_layers=1, residual_channels=8, attention_heads=2, time_embedding_dim=8)
    p = init_params(cfg, seed=5)
    p["head.2.w"][...] = np.inf
    task = random_task(np.random.default_rng(9), path_graph, L=5, batch=2)
    with pytest.raises(TrainingError, match="non-finite"):
        train_step(task, p, cfg, training, AdamW(), np.random.default_rng(0))


@pytest.fixture(scope="module")
def small_synth():
    return synth_generate(6, 600, seed=7)


def test_loss_halves_within_two_hundred_steps(small_synth):
    ds = small_synth
    g = graph_from_distances(ds.distances)
    cfg = ModelConfig.desk()
    p = init_params(cfg, seed=0)
    opt = AdamW(1e-3, 1e-6)
    rng = np.random.default_rng(0)
    z = (ds.values - ds.values[:420].mean(0)) / ds.values[:420].std(0)
    training = TrainConfig().schedule
    losses = []
    for _ in range(200):
        starts = rng.integers(0, 420 - 24, 16)
        x = np.stack([z[s:s + 24] for s in starts])
        om = np.ones_like(x, bool)
        tm, _ = make_targets(x, om, MaskSpec(strategy="point"), rng)
        losses.append(train_step(make_task(x, om, tm, g), p, cfg, training, opt, rng))
    assert np.mean(losses[-20:]) <= 0.5 * np.mean(losses[:20])


def test_train_loop_zero_epochs_and_determinism(small_synth, tmp_path):
    cfg = ModelConfig.desk()
    tc = TrainConfig(epochs=0, train_stride=12)
    res = train_loop(small_synth, tc, cfg, MaskSpec(), checkpoint_path=tmp_path / "c.fsti")
    assert res.curve == [] and res.best_epoch is None
    assert np.array_equal(res.params.to_vector(), init_params(cfg, seed=0).to_vector())
    params, _, extra = load_checkpoint(tmp_path / "c.fsti")
    assert np.array_equal(params.to_vector(), res.params.to_vector())
    assert extra["sequence_length"] == 24 and "normalizer" in extra

    tc = TrainConfig(epochs=2, train_stride=12, seed=3)
    a = train_loop(small_synth, tc, cfg, MaskSpec())
    b = train_loop(small_synth, tc, cfg, MaskSpec())
    assert a.curve == b.curve and len(a.curve) == 2
    a.write_curve(tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 3
    best = min(a.curve, key=lambda r: r["val_loss"])
    assert a.best_epoch == best["epoch"]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
