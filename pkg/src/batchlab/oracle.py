"""Exhaustive ground truth for small pools.

* the reward distribution over all C(N, B) batches,
* the exact terminal marginal of a policy, by a forward dynamic program over
  the subset lattice,
* empirical distributions and Jensen-Shannon divergence (natural log).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import logsumexp

from .policy import PolicyContext, PolicyNet
from .reward import RewardModel

DEFAULT_CAP = 10**6


class CapExceeded(ValueError):
    pass


@dataclass(frozen=True)
class RewardDistribution:
    support: list[tuple[int, ...]]
    log_rewards: np.ndarray
    probs: np.ndarray


def support(n: int, b: int, cap: int = DEFAULT_CAP) -> list[tuple[int, ...]]:
    size = math.comb(n, b)
    if size > cap:
        raise CapExceeded(f"C({n},{b}) = {size} batches exceeds the enumeration cap {cap}")
    return list(itertools.combinations(range(n), b))


def enumerate_rewards(model: RewardModel, b: int, cap: int = DEFAULT_CAP,
                      chunk: int = 50000) -> RewardDistribution:
    sup = support(model.n, b, cap)
    rows = np.array(sup, dtype=np.int64).reshape(len(sup), b)
    jmi = np.concatenate([model.jmi_many(rows[i:i + chunk]) for i in range(0, len(rows), chunk)])
    ell = jmi / model.spec.temperature
    return RewardDistribution(sup, ell, np.exp(ell - logsumexp(ell)))


def net_log_pf(net: PolicyNet, ctx: PolicyContext, chunk: int = 256):
    """Adapter: stacked states (S, k) -> forward log-probabilities (S, N)."""
    prep_cache = {}

    @torch.no_grad()
    def fn(states: np.ndarray) -> np.ndarray:
        if "prep" not in prep_cache:
            prep_cache["prep"] = net.prepare(ctx)
        prep = prep_cache["prep"]
        out = []
        for i in range(0, len(states), chunk):
            fwd, _, _ = net.evaluate(prep, torch.as_tensor(states[i:i + chunk]))
            out.append(torch.log_softmax(fwd.double(), -1).numpy())
        return np.concatenate(out) if out else np.zeros((0, ctx.n))

    return fn


def exact_policy_marginal(log_pf_fn, n: int, b: int, cap: int = DEFAULT_CAP) -> np.ndarray:
    """Terminal marginal of a forward policy, aligned with ``support(n, b)``.

    ``log_pf_fn`` maps an (S, k) array of sorted states to (S, N) forward
    log-probabilities (``-inf`` on masked entries).
    """
    n_states = sum(math.comb(n, k) for k in range(b + 1))
    if n_states > cap:
        raise CapExceeded(f"{n_states} lattice states exceed the cap {cap}")
    level = {(): 1.0}
    for k in range(b):
        states = list(level)
        arr = np.array(states, dtype=np.int64).reshape(len(states), k)
        probs = np.exp(log_pf_fn(arr))
        nxt: dict[tuple[int, ...], float] = {}
        for s, p_s, row in zip(states, (level[s] for s in states), probs):
            taken = set(s)
            for a in range(n):
                if a in taken or row[a] == 0.0:
                    continue
                child = tuple(sorted(s + (a,)))
                nxt[child] = nxt.get(child, 0.0) + p_s * row[a]
        level = nxt
    return np.array([level.get(s, 0.0) for s in itertools.combinations(range(n), b)])


def empirical_distribution(samples, sup) -> np.ndarray:
    pos = {tuple(s): i for i, s in enumerate(sup)}
    counts = np.zeros(len(sup))
    for s in samples:
        key = tuple(s.indices) if hasattr(s, "indices") else tuple(sorted(s))
        if key not in pos:
            raise KeyError(f"sample {key} is not in the support")
        counts[pos[key]] += 1
    if not counts.sum():
        return counts
    return counts / counts.sum()


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / m[nz])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("supports are not aligned")
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def density_parity(p_true, p_model) -> tuple[float, float]:
    """Least-squares fit p_model ≈ slope * p_true + intercept."""
    slope, intercept = np.polyfit(np.asarray(p_true), np.asarray(p_model), 1)
    return float(slope), float(intercept)


@dataclass
class DistributionReport:
    support: list[tuple[int, ...]]
    p_true: np.ndarray
    p_model: np.ndarray
    jsd_nats: float
    slope: float
    intercept: float

    @classmethod
    def build(cls, sup, p_true, p_model) -> "DistributionReport":
        slope, intercept = density_parity(p_true, p_model)
        return cls(list(sup), np.asarray(p_true), np.asarray(p_model), jsd(p_true, p_model),
                   slope, intercept)

    def write(self, path, n: int, b: int, temperature: float, seed: int) -> None:
        """First line: header object.  Then one object per batch."""
        header = {"N": n, "B": b, "T": temperature, "seed": seed, "jsd_nats": self.jsd_nats,
                  "jsd_units": "nats", "slope": self.slope, "intercept": self.intercept,
                  "regression": "p_model on p_true"}
        dump = lambda r: json.dumps(r, sort_keys=True, separators=(",", ":"))  # noqa: E731
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(dump(header) + "\n")
            for s, a, c in zip(self.support, self.p_true, self.p_model):
                fh.write(dump({"indices": list(s), "p_true": float(a), "p_model": float(c)}) + "\n")


def read_report(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(x) for x in fh]
    return lines[0], lines[1:]


# --- submodularity -------------------------------------------------------------


def random_posterior_cov(rng: np.random.Generator, pool_size: int) -> tuple[np.ndarray, float]:
    """Posterior covariance of a random GP conditioned on random data."""
    from .data import TrainSet
    from .gp import KernelParams, posterior

    p = KernelParams(lengthscale=float(rng.uniform(0.2, 2.0)), outputscale=float(rng.uniform(0.3, 3.0)),
                     noise_var=float(rng.uniform(0.01, 0.5)))
    m = int(rng.integers(0, 5))
    train = TrainSet(np.arange(m), rng.normal(size=m), rng.normal(size=m))
    return posterior(train, p, rng.normal(size=pool_size)).cov, p.noise_var


def _half_logdet(cov: np.ndarray, idx: tuple[int, ...], noise_var: float) -> float:
    if not idx:
        return 0.0
    sub = cov[np.ix_(idx, idx)]
    sign, ld = np.linalg.slogdet(np.eye(len(idx)) + sub / noise_var)
    return 0.5 * ld if sign > 0 else -np.inf


def worst_submodularity_violation(cov: np.ndarray, noise_var: float) -> float:
    """max over S ⊂ S' and x ∉ S' of gain(x | S') - gain(x | S)."""
    n = cov.shape[0]
    items = range(n)
    f = {}
    for k in range(n + 1):
        for s in itertools.combinations(items, k):
            f[s] = _half_logdet(cov, s, noise_var)
    worst = -np.inf
    for big in f:
        for x in items:
            if x in big:
                continue
            big_x = tuple(sorted(big + (x,)))
            with np.errstate(invalid="ignore"):
                g_big = f[big_x] - f[big]
            for k in range(len(big) + 1):
                for small in itertools.combinations(big, k):
                    g_small = f[tuple(sorted(small + (x,)))] - f[small]
                    with np.errstate(invalid="ignore"):
                        v = g_big - g_small
                    if not np.isfinite(v):
                        v = np.inf
                    worst = max(worst, v)
    return float(worst)


def submodularity_check(trials: int, pool_size: int, rng: np.random.Generator,
                        covs=None, tol: float = 1e-9) -> dict:
    """Exhaustive diminishing-returns check on random (or given) posteriors."""
    cases = covs if covs is not None else [random_posterior_cov(rng, pool_size) for _ in range(trials)]
    worst = max(worst_submodularity_violation(c, nv) for c, nv in cases)
    return {"trials": len(cases), "pool_size": pool_size, "worst_violation": worst,
            "tolerance": tol, "passed": bool(worst <= tol)}
