import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from batchlab import oracle
from batchlab.reward import RewardModel, RewardSpec, joint_mi


def _random_policy(n, seed):
    """Deterministic state-dependent forward log-probabilities."""
    cache = {}

    def logits(state):
        if state not in cache:
            r = np.random.default_rng([seed, *state, 99])
            z = r.normal(size=n) * 2
            z[list(state)] = -np.inf
            cache[state] = z - logsumexp(z)
        return cache[state]

    def fn(states):
        return np.array([logits(tuple(int(i) for i in s)) for s in states]).reshape(len(states), n)

    return fn, logits


def _brute_force(logits, n, b):
    out = {}
    for seq in itertools.permutations(range(n), b):
        lp = 0.0
        for k in range(b):
            lp += logits(tuple(sorted(seq[:k])))[seq[k]]
        key = tuple(sorted(seq))
        out[key] = out.get(key, 0.0) + math.exp(lp)
    return np.array([out[s] for s in itertools.combinations(range(n), b)])


def _uniform(n):
    def fn(states):
        out = np.full((len(states), n), 0.0)
        for row, s in zip(out, states):
            row[list(s)] = -np.inf
            row[np.isfinite(row)] = -math.log(n - len(s))
        return out
    return fn


def test_uniform_policy_three_choose_two():
    p = oracle.exact_policy_marginal(_uniform(3), 3, 2)
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-12)


def test_smallest_index_policy_is_point_mass():
    def fn(states):
        out = np.full((len(states), 5), -np.inf)
        for row, s in zip(out, states):
            row[min(set(range(5)) - set(s))] = 0.0
        return out

    p = oracle.exact_policy_marginal(fn, 5, 2)
    assert p[0] == 1.0 and p[1:].sum() == 0.0


@pytest.mark.parametrize("n,b", [(n, b) for n in range(1, 7) for b in range(0, 4) if b <= n])
def test_dp_matches_trajectory_enumeration(n, b):
    fn, logits = _random_policy(n, seed=10 * n + b)
    dp = oracle.exact_policy_marginal(fn, n, b)
    bf = _brute_force(logits, n, b)
    np.testing.assert_allclose(dp, bf, rtol=0, atol=1e-12)
    assert abs(dp.sum() - 1) < 1e-12


def test_caps():
    with pytest.raises(oracle.CapExceeded, match="cap 10"):
        oracle.support(6, 3, cap=10)
    with pytest.raises(oracle.CapExceeded):
        oracle.exact_policy_marginal(_uniform(6), 6, 3, cap=20)
    assert len(oracle.support(5, 2)) == 10


def _model(cov, nv=0.1, t=1.0):
    return RewardModel(np.asarray(cov, dtype=float), nv, RewardSpec(t))


def test_enumerate_equal_rewards_uniform():
    d = oracle.enumerate_rewards(_model(np.eye(3)), 2)
    np.testing.assert_allclose(d.probs, [1 / 3] * 3, atol=1e-15)


def test_enumerate_flat_limit():
    cov, nv = oracle.random_posterior_cov(np.random.default_rng(0), 5)
    d = oracle.enumerate_rewards(_model(cov, nv, 1e12), 2)
    np.testing.assert_allclose(d.probs, 0.1, atol=1e-9)


def test_enumerate_matches_direct_normalisation():
    cov, nv = oracle.random_posterior_cov(np.random.default_rng(1), 5)
    t = 0.3
    d = oracle.enumerate_rewards(_model(cov, nv, t), 2)
    w = [math.exp(joint_mi(cov[np.ix_(s, s)], nv) / t) for s in itertools.combinations(range(5), 2)]
    np.testing.assert_allclose(d.probs, np.array(w) / sum(w), rtol=1e-12)
    assert d.support == list(itertools.combinations(range(5), 2))


def test_empirical_distribution():
    sup = [(0, 1), (0, 2), (1, 2)]
    np.testing.assert_array_equal(oracle.empirical_distribution([(1, 0)] * 3, sup), [1, 0, 0])
    np.testing.assert_array_equal(oracle.empirical_distribution([(0, 1), (0, 1), (0, 2), (2, 0)], sup),
                                  [0.5, 0.5, 0])
    with pytest.raises(KeyError):
        oracle.empirical_distribution([(0, 3)], sup)


def test_empirical_distribution_converges():
    r = np.random.default_rng(2)
    p = r.dirichlet(np.ones(10))
    sup = list(itertools.combinations(range(5), 2))
    draws = [sup[i] for i in r.choice(10, size=100_000, p=p)]
    q = oracle.empirical_distribution(draws, sup)
    assert 0.5 * np.abs(p - q).sum() < 0.01


def test_jsd_values():
    p = np.array([0.2, 0.3, 0.5])
    assert oracle.jsd(p, p) == 0.0
    assert oracle.jsd([1, 0], [0, 1]) == pytest.approx(math.log(2), abs=1e-15)
    want = 0.5 * math.log(1 / 0.75) + 0.5 * (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25))
    assert oracle.jsd([1, 0], [0.5, 0.5]) == pytest.approx(want, rel=1e-14)
    assert want == pytest.approx(0.215761554339, abs=1e-12)
    q = np.random.default_rng(3).dirichlet(np.ones(3))
    assert oracle.jsd(p, q) == oracle.jsd(q, p)
    with pytest.raises(ValueError):
        oracle.jsd([1.0], [0.5, 0.5])


def test_density_parity_and_report(tmp_path):
    p = np.array([0.1, 0.2, 0.7])
    rep = oracle.DistributionReport.build([(0, 1), (0, 2), (1, 2)], p, p)
    assert rep.slope == pytest.approx(1.0) and rep.intercept == pytest.approx(0.0, abs=1e-12)
    rep.write(tmp_path / "r.jsonl", 3, 2, 1.0, 7)
    head, rows = oracle.read_report(tmp_path / "r.jsonl")
    assert head["jsd_units"] == "nats" and head["N"] == 3 and head["seed"] == 7
    assert {"slope", "intercept", "jsd_nats", "T", "B"} <= head.keys()
    assert rows[2] == {"indices": [1, 2], "p_true": 0.7, "p_model": 0.7}


def test_submodularity_diagonal_has_no_violation():
    rep = oracle.submodularity_check(0, 4, None, covs=[(np.diag([0.3, 1.0, 2.0, 0.5]), 0.1)])
    assert rep["worst_violation"] <= 1e-12 and rep["passed"]


def test_submodularity_random_posteriors():
    rep = oracle.submodularity_check(100, 4, np.random.default_rng(4))
    assert rep["trials"] == 100 and rep["passed"] and rep["worst_violation"] <= 1e-9


def test_submodularity_negative_control():
    # indefinite "covariance": the log-det gain can grow with the conditioning set
    bad = np.array([[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    rep = oracle.submodularity_check(0, 3, None, covs=[(bad, 0.5)])
    assert not rep["passed"]
