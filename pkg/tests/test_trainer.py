from dataclasses import replace
import time

import numpy as np
import pytest

from pcl.clustering import kmeans
from pcl.data import AugmentConfig, gen_hierarchical_mixture, split_dataset
from pcl.encoder import NetSpec, encode, init_params
from pcl.errors import ConfigError
from pcl.experiments import embed_knn, random_init_knn
from pcl.prototypes import PrototypeSet, build_prototype_set
from pcl.trainer import (TrainConfig, TrainState, e_step, em_full_batch, full_batch_m_step, lr_at, m_step_epoch,
                         refresh_bank, surrogate_gradient, surrogate_lower_bound, train)

import oracles
from conftest import central_difference, rel_err, unit_rows

# 4 coarse x 2 fine classes in 8 dimensions; 512 training rows, 256 held out
SMOKE_SPEC = NetSpec(8, (32,), 8)
SMOKE_AUG = AugmentConfig(sigma_aug=0.5)


def smoke_config(seed):
    return TrainConfig(tau=0.5, r=16, K=(4, 8), m_ema=0.99, warmup=5, epochs=30, batch_size=64, lr=0.1,
                       lr_milestones=(20,), seed=seed)


def smoke_data(seed):
    return split_dataset(gen_hierarchical_mixture(4, 2, 96, 8, 10.0, 4.0, 1.0, seed=seed), 1 / 3, seed)


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.tau, cfg.alpha, cfg.r, cfg.K, cfg.m_ema, cfg.warmup) == (0.1, 10.0, 16000, (25000, 50000, 100000), 0.999, 20)
    assert cfg.M == 3


def test_lr_schedule():
    cfg = TrainConfig(lr=0.03, lr_milestones=(120, 160), lr_factor=0.1)
    assert lr_at(cfg, 0) == 0.03
    assert lr_at(cfg, 130) == pytest.approx(0.003, rel=1e-12)
    assert lr_at(cfg, 160) == pytest.approx(0.0003, rel=1e-12)


@pytest.mark.parametrize("kw", [dict(tau=0.0), dict(lr=-1.0), dict(warmup=5, epochs=3), dict(K=()),
                                dict(loss_mode="mixed"), dict(m_ema=1.0)])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_cluster_count_above_n():
    with pytest.raises(ConfigError):
        train(np.zeros((3, 2)), TrainConfig(K=(4,), epochs=1, warmup=0), NetSpec(2, (), 2))


def _pset(centroids, phi, assignment):
    centroids = np.asarray(centroids, float)
    return PrototypeSet(centroids, np.asarray(phi, float), np.bincount(assignment, minlength=len(centroids)),
                        np.asarray(assignment))


def _identity_params(d):
    params = init_params(NetSpec(d, (), d), 0)
    params.main[0][...] = np.eye(d)
    params.main[1][...] = 0.0
    return params


def test_surrogate_single_cluster_is_zero():
    x = np.random.default_rng(0).standard_normal((5, 3))
    params = init_params(NetSpec(3, (4,), 2), 1)
    v = encode(params, x)
    assert surrogate_lower_bound(params, x, _pset([[1.0, 0.0]], [0.1], np.zeros(5, int))) == 0.0
    assert v.shape == (5, 2)


def test_surrogate_hand_value():
    # logits (2, 0) for the single point, assigned to prototype 0
    params = _identity_params(2)
    ps = _pset([[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5], [0])
    F = surrogate_lower_bound(params, np.array([[1.0, 0.0]]), ps)
    assert F == pytest.approx(np.log(0.5) + np.log(np.exp(2) / (np.exp(2) + 1)), abs=1e-12)
    assert F == pytest.approx(-0.820075, abs=1e-6)


def test_surrogate_is_nonpositive_and_gradient_matches():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((7, 3))
    params = init_params(NetSpec(3, (4,), 3), 3)
    cents = unit_rows(rng, 3, 3)
    ps = _pset(cents, rng.uniform(0.1, 0.5, 3), rng.integers(0, 3, 7))
    value, grads = surrogate_gradient(params, x, ps)
    assert value <= 0
    assert value == pytest.approx(surrogate_lower_bound(params, x, ps), abs=1e-12)
    numeric = central_difference(lambda: surrogate_lower_bound(params, x, ps), params.main)
    for a, n in zip(grads, numeric):
        assert rel_err(a, n) < 1e-5


def test_e_step_contract_and_determinism():
    x = np.random.default_rng(4).standard_normal((40, 5))
    cfg = TrainConfig(K=(2, 4), tau=0.2, epochs=1, warmup=0, seed=7)
    state = TrainState(init_params(NetSpec(5, (), 3), 1))
    e_step(state, x, cfg)
    assert state.bank.features.shape == (40, 3)
    np.testing.assert_allclose(np.linalg.norm(state.bank.features, axis=1), 1.0, atol=1e-9)
    assert [p.k for p in state.psets] == [2, 4]
    first = [(p.centroids.copy(), p.phi.copy(), p.assignment.copy()) for p in state.psets]
    e_step(state, x, cfg)
    for (c, phi, a), p in zip(first, state.psets):
        assert c.tobytes() == p.centroids.tobytes()
        assert phi.tobytes() == p.phi.tobytes()
        np.testing.assert_array_equal(a, p.assignment)


def test_e_step_two_pairs_matches_exhaustive_partition():
    pts = np.array([[1.0, 0.0], [-1.0, 0.0], [0.6, 0.8], [-0.6, -0.8]])
    state = TrainState(_identity_params(2))
    e_step(state, pts, TrainConfig(K=(2,), epochs=1, warmup=0))
    best, _ = oracles.best_partition(pts, 2)
    assert oracles.same_partition(state.psets[0].assignment, best)


def test_m_step_needs_prototypes_after_warmup():
    state = TrainState(init_params(NetSpec(3, (), 2), 0))
    state.epoch = 3
    cfg = TrainConfig(K=(2,), warmup=1, epochs=4, r=4, batch_size=4)
    x = np.random.default_rng(0).standard_normal((8, 3))
    refresh_bank(state, x)
    with pytest.raises(ValueError):
        m_step_epoch(state, x, cfg, AugmentConfig())


def test_zero_epochs():
    state, records = train(np.ones((4, 2)), TrainConfig(K=(2,), epochs=0, warmup=0), NetSpec(2, (), 2))
    assert records == [] and state.history == []
    assert state.bank is None and state.psets == []


def test_training_never_reads_labels():
    tr, _ = smoke_data(0)
    cfg = replace(smoke_config(0), epochs=7)
    a = train(tr, cfg, SMOKE_SPEC, SMOKE_AUG)[1]
    b = train(tr.inputs, cfg, SMOKE_SPEC, SMOKE_AUG)[1]
    assert a == b


@pytest.fixture(scope="module")
def smoke_runs():
    out = []
    for seed in range(5):
        tr, te = smoke_data(seed)
        t0 = time.perf_counter()
        state, records = train(tr, smoke_config(seed), SMOKE_SPEC, SMOKE_AUG)
        out.append(dict(seed=seed, train=tr, test=te, state=state, records=records,
                        seconds=time.perf_counter() - t0))
    return out


def test_smoke_runs_fast_and_beat_random_init(smoke_runs):
    for run in smoke_runs:
        assert len(run["train"]) == 512
        assert run["seconds"] < 60
        knn = embed_knn(run["state"].params, run["train"], run["test"])
        assert knn > random_init_knn(run["seed"], run["train"], run["test"], SMOKE_SPEC)


def test_warmup_has_no_prototype_loss(smoke_runs):
    for run in smoke_runs:
        for rec in run["records"][:5]:
            assert rec["proto_loss_0"] == 0.0 and rec["proto_loss_1"] == 0.0
            assert "F_before_0" not in rec
        for rec in run["records"][5:]:
            assert rec["proto_loss_0"] > 0.0


def test_surrogate_rises_in_most_epochs(smoke_runs):
    # the M-step minimizes the granularity-averaged prototype loss, so that average is what should rise
    for run in smoke_runs:
        post = run["records"][5:]
        ok = [np.mean([r[f"F_after_{m}"] for m in range(2)]) >= np.mean([r[f"F_before_{m}"] for m in range(2)]) - 1e-3
              for r in post]
        assert np.mean(ok) >= 0.9, (run["seed"], np.mean(ok))


def test_one_epoch_lowers_training_loss():
    wins = 0
    for seed in range(5):
        tr, _ = smoke_data(seed)
        records = train(tr, replace(smoke_config(seed), epochs=3, warmup=3), SMOKE_SPEC, SMOKE_AUG)[1]
        wins += records[2]["loss"] < records[1]["loss"]
    assert wins >= 4


def test_full_batch_m_step_is_monotone():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((30, 4))
    params = init_params(NetSpec(4, (5,), 3), 2)
    feats = encode(params, x)
    ps = build_prototype_set(kmeans(feats, 3), feats, tau=0.2)
    trace = full_batch_m_step(params, x, ps, max_steps=50)
    assert len(trace) > 1
    assert all(b >= a for a, b in zip(trace, trace[1:]))
    for p, pm in zip(params.main, params.momentum):
        np.testing.assert_array_equal(p, pm)


def test_em_full_batch_rounds():
    x = gen_hierarchical_mixture(2, 2, 10, 4, 10.0, 4.0, 1.0, seed=0).inputs
    rounds = em_full_batch(x, NetSpec(4, (6,), 3), k=3, rounds=3, tau=0.2, max_steps=30)
    assert [r["round"] for r in rounds] == [0, 1, 2]
    for r in rounds:
        assert r["F_after"] >= r["F_before"]
