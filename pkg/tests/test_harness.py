import math

import numpy as np
import pytest

from batchlab import data, gp, harness, oracle
from batchlab import rng as rng_mod
from batchlab.config import Config

FAST = dict(gp_epochs=60, hidden=16, test_size=100)


def _strip(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


def test_al_steps_zero_only_seed_evaluation():
    lg = harness.run_al(Config(pool_size=30, al_steps=0, strategy="random", **FAST))
    assert len(lg.records) == 1 and lg.records[0]["train_size"] == 10


def test_random_strategy_train_sizes():
    cfg = Config(pool_size=2000, seed_size=10, query_size=10, al_steps=5, strategy="random", **FAST)
    lg = harness.run_al(cfg)
    assert [r["train_size"] for r in lg.records] == [10, 20, 30, 40, 50, 60]
    chosen = [i for r in lg.records for i in r["selected_batch"]]
    assert len(chosen) == len(set(chosen)) == 50


def test_gfn_inference_cost_and_determinism():
    cfg = Config(pool_size=25, seed_size=5, query_size=3, al_steps=2, strategy="gfn", iterations=20, **FAST)
    a = harness.run_al(cfg, seed=4)
    assert [r["policy_eval_count"] for r in a.records[1:]] == [60, 60]
    assert len(a.gfn_traces) == 2 and len(a.gfn_traces[0]) == 20
    b = harness.run_al(cfg, seed=4)
    assert _strip(a.records) == _strip(b.records)
    c = harness.run_al(cfg, seed=5)
    assert _strip(a.records) != _strip(c.records)


@pytest.mark.parametrize("strategy", ["bald", "stochastic-bald", "batchbald"])
def test_baseline_strategies_run(strategy):
    cfg = Config(pool_size=30, seed_size=5, query_size=4, al_steps=2, strategy=strategy, **FAST)
    lg = harness.run_al(cfg)
    assert [r["train_size"] for r in lg.records] == [5, 9, 13]
    assert all(r["batch_jmi"] > 0 for r in lg.records[1:])


def _state(cfg, seed=0):
    pool, orc = data.sample_pool(cfg.pool_size, cfg.noise_scale, seed)
    train, pool = data.draw_seed_set(pool, orc, cfg.seed_size, rng_mod.stream(seed, "seed_set"))
    st = harness.ALState(pool, train, harness.fit_model(cfg, train))
    st.net = harness.new_net(cfg, 0)
    return st


def test_lookahead_zero_is_noop():
    cfg = Config(pool_size=50, seed_size=17, query_size=3, al_steps=1, **FAST)
    st = _state(cfg)
    before = st.net.flat_params()
    harness.lookahead_update(cfg, st, 0, np.random.default_rng(0))
    np.testing.assert_array_equal(st.net.flat_params(), before)
    assert st.adam is None


def test_lookahead_hallucinated_sizes_and_isolation(monkeypatch):
    cfg = Config(pool_size=50, seed_size=17, query_size=3, al_steps=1, lookahead_iterations=3,
                 train_context="true", **FAST)
    st = _state(cfg)
    snap = (st.pool.ids.copy(), st.pool.x.copy(), st.train.ids.copy(), st.train.x.copy(), st.train.y.copy(),
            st.model.params)
    sizes = []
    real_fit = harness.fit_model

    def spy(cfg_, train, init=None):
        sizes.append(len(train))
        return real_fit(cfg_, train, init)

    monkeypatch.setattr(harness, "fit_model", spy)
    before = st.net.flat_params()
    harness.lookahead_update(cfg, st, 10, np.random.default_rng(1))
    assert sizes == [20] * 10
    assert st.adam.t == 30
    assert not np.array_equal(st.net.flat_params(), before)
    after = (st.pool.ids, st.pool.x, st.train.ids, st.train.x, st.train.y, st.model.params)
    for a, b in zip(snap[:5], after[:5]):
        np.testing.assert_array_equal(a, b)
    assert snap[5] == after[5]


def test_evaluate_identities():
    r = np.random.default_rng(0)
    x = np.sort(r.uniform(-2, 2, 15))
    y = np.sin(x)
    exact = data.TrainSet(np.arange(15), x, y)
    model = gp.FittedGP(gp.KernelParams(0.5, 1.0, 1e-10), exact)
    assert harness.evaluate(model, exact)["test_loss"] < 1e-12
    centred = data.TrainSet(np.arange(15), x, y - y.mean())
    prior = gp.FittedGP(gp.KernelParams(), data.TrainSet.empty())
    got = harness.evaluate(prior, centred)
    assert got["test_loss"] == pytest.approx(np.var(y), rel=1e-12)
    var = 1.0 + 0.1
    assert got["test_nlpd"] == pytest.approx(0.5 * math.log(2 * math.pi * var) + 0.5 * np.var(y) / var, rel=1e-12)


def test_random_acquisition_improves_on_average():
    cfg = Config(pool_size=200, seed_size=5, query_size=5, al_steps=4, strategy="random", gp_epochs=200,
                 test_size=300)
    first, last = [], []
    for seed in range(5):
        lg = harness.run_al(cfg, seed)
        first.append(lg.records[0]["test_loss"])
        last.append(lg.records[-1]["test_loss"])
    assert np.mean(last) < np.mean(first)


def test_aggregate_mean_and_stderr():
    logs = [harness.RunLog([{"train_size": 10, "test_loss": v}]) for v in (1.0, 2.0, 3.0)]
    (row,) = harness.aggregate({"random": logs})
    assert row["test_loss_mean"] == 2.0 and row["labelled_count"] == 10
    assert row["test_loss_stderr"] == pytest.approx(1 / math.sqrt(3))


def test_iterations_to():
    curve = [(0, 0.5), (50, 0.2), (100, 0.05)]
    assert harness.iterations_to(curve, 0.1) == 100
    assert harness.iterations_to(curve, 0.01) == math.inf


def test_transfer_reinit_starts_from_untrained_policy():
    cfg = Config(pool_size=12, seed_size=4, query_size=2, al_steps=1, iterations=30, transfer_iterations=10,
                 checkpoint_every=5, lookahead_samples=1, lookahead_iterations=5, **FAST)
    out = harness.transfer_experiment(cfg, 0)
    assert set(out["curves"]) == {"reinit", "continue", "lookahead"}
    assert [i for i, _ in out["curves"]["reinit"]] == [0, 5, 10]
    # the fresh net is uniform, so its JSD is that of the uniform distribution
    pool, orc = data.sample_pool(12, 0.1, 0)
    train, pool = data.draw_seed_set(pool, orc, 4, rng_mod.stream(0, "seed_set"))
    ids = np.array(out["selected_batch"])
    keep = ~np.isin(pool.ids, ids)
    pos = np.flatnonzero(~keep)
    train1 = train.extend(ids, pool.x[pos], orc.label(ids))
    pool1 = pool.remove(pos)
    cfg1 = cfg.replace(train_context="true")
    rm = harness.reward_model(cfg1, harness.fit_model(cfg1, train1), pool1)
    truth = oracle.enumerate_rewards(rm, 2)
    uniform = np.full(len(truth.probs), 1 / len(truth.probs))
    assert out["curves"]["reinit"][0][1] == pytest.approx(oracle.jsd(truth.probs, uniform), rel=1e-9)
