"""Reference acquisition strategies."""

from __future__ import annotations

import numpy as np

from .env import BatchState
from .reward import RewardModel


def _check_size(b: int, n: int) -> None:
    if not 0 <= b <= n:
        raise ValueError(f"batch size {b} must lie in [0, pool size {n}]")


def random_batch(n: int, b: int, rng: np.random.Generator) -> BatchState:
    _check_size(b, n)
    return BatchState(tuple(int(i) for i in rng.choice(n, size=b, replace=False)), b)


def bald_topB(scores, b: int) -> BatchState:
    """Indices of the ``b`` largest scores; ties go to the smaller index."""
    s = np.asarray(scores, dtype=np.float64)
    _check_size(b, len(s))
    order = np.lexsort((np.arange(len(s)), -s))
    return BatchState(tuple(int(i) for i in order[:b]), b)


def stochastic_bald(scores, b: int, temp: float, rng: np.random.Generator) -> BatchState:
    """Sequential softmax sampling without replacement, p ∝ exp(score / temp).

    Implemented with the Gumbel top-k trick, which draws exactly this
    sequential distribution.
    """
    s = np.asarray(scores, dtype=np.float64)
    _check_size(b, len(s))
    if not temp > 0:
        raise ValueError("temp must be positive")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    keys = s / temp + rng.gumbel(size=len(s))
    order = np.argsort(-keys, kind="stable")
    return BatchState(tuple(int(i) for i in order[:b]), b)


def batchbald_greedy(model: RewardModel, b: int, mode: str = "rank_one") -> BatchState:
    """Greedy maximisation of the joint mutual information.

    ``rank_one`` keeps every candidate's variance conditioned on the noisy
    labels of the batch so far and downdates it once per pick (O(N b^2) in
    total); ``naive`` re-factorises the full batch for every candidate.
    """
    _check_size(b, model.n)
    if mode == "rank_one":
        picks = _greedy_rank_one(model.cov, model.noise_var, b)
    elif mode == "naive":
        picks = _greedy_naive(model, b)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return BatchState(tuple(picks), b)


def _greedy_rank_one(cov: np.ndarray, noise_var: float, b: int) -> list[int]:
    n = cov.shape[0]
    var = np.diag(cov).astype(np.float64).copy()
    rows = np.zeros((b, n))
    taken = np.zeros(n, dtype=bool)
    picks = []
    for j in range(b):
        gain = np.where(taken, -np.inf, np.log1p(np.clip(var, 0, None) / noise_var))
        p = int(np.argmax(gain))
        picks.append(p)
        taken[p] = True
        c = cov[:, p] - rows[:j].T @ rows[:j, p]
        rows[j] = c / np.sqrt(var[p] + noise_var)
        var -= rows[j] ** 2
    return picks


def _greedy_naive(model: RewardModel, b: int) -> list[int]:
    picks: list[int] = []
    for _ in range(b):
        cand = [i for i in range(model.n) if i not in picks]
        rows = np.array([picks + [i] for i in cand])
        jmi = model.jmi_many(rows)
        picks.append(cand[int(np.argmax(jmi))])
    return picks


STRATEGIES = ("random", "bald", "stochastic-bald", "batchbald", "gfn")
