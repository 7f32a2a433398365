"""Batch utilities under an exact GP: joint mutual information and friends.

Rewards are carried as log rewards ``JMI(s) / T`` everywhere; nothing here
exponentiates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp import FittedGP, matern_kernel

PSD_TOL = 1e-8


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class RewardSpec:
    temperature: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def joint_mi(cov, noise_var: float) -> float:
    """0.5 * log det(I + cov / noise_var), via Cholesky."""
    c = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    n = c.shape[0]
    if n == 0:
        return 0.0
    if noise_var <= 0:
        raise RewardError("noise_var must be positive")
    scale = max(1.0, float(np.abs(np.diag(c)).max()))
    if not np.allclose(c, c.T, rtol=0, atol=PSD_TOL * scale):
        raise RewardError("covariance is not symmetric")
    lo = np.linalg.eigvalsh(0.5 * (c + c.T)).min() if n > 1 else c[0, 0]
    if lo < -PSD_TOL * scale:
        raise RewardError(f"covariance is indefinite (min eigenvalue {lo:.3e})")
    a = np.eye(n) + c / noise_var
    chol = np.linalg.cholesky(0.5 * (a + a.T))
    return float(np.log(np.diag(chol)).sum())


def _prefix_half_logdets(sub: np.ndarray, noise_var: float) -> np.ndarray:
    """For stacked k x k covariances, 0.5 logdet of every leading block.

    The Cholesky factor of a leading block is the leading block of the full
    factor, so one factorisation yields all prefixes.  Returns shape (..., k+1)
    with a leading zero for the empty prefix.
    """
    k = sub.shape[-1]
    a = np.eye(k) + sub / noise_var
    chol = np.linalg.cholesky(a)
    logs = np.log(np.diagonal(chol, axis1=-2, axis2=-1))
    out = np.zeros(sub.shape[:-2] + (k + 1,))
    out[..., 1:] = np.cumsum(logs, axis=-1)
    return out


@dataclass(frozen=True)
class RewardModel:
    """Model context for one acquisition step.

    ``cov`` is the covariance of the latent function at the current pool
    points (posterior given the train set by default), indexed by pool
    position.
    """

    cov: np.ndarray
    noise_var: float
    spec: RewardSpec

    @classmethod
    def from_gp(cls, gp: FittedGP, pool_x, spec: RewardSpec, covariance: str = "posterior"):
        if covariance == "posterior":
            cov = gp.posterior(pool_x).cov
        elif covariance == "prior":
            cov = matern_kernel(pool_x, pool_x, gp.params)
        else:
            raise ValueError(f"covariance must be 'posterior' or 'prior', got {covariance!r}")
        return cls(cov, gp.params.noise_var, spec)

    @property
    def n(self) -> int:
        return self.cov.shape[0]

    def with_temperature(self, t: float) -> "RewardModel":
        return RewardModel(self.cov, self.noise_var, RewardSpec(t))

    def jmi(self, indices) -> float:
        idx = np.asarray(tuple(indices), dtype=np.int64)
        return joint_mi(self.cov[np.ix_(idx, idx)], self.noise_var)

    def log_reward(self, indices) -> float:
        return self.jmi(indices) / self.spec.temperature

    def jmi_many(self, index_rows) -> np.ndarray:
        """JMI of many equal-size batches at once; rows are index tuples."""
        rows = np.asarray(index_rows, dtype=np.int64)
        if rows.ndim != 2:
            raise ValueError("expected a 2-D array of index rows")
        if rows.shape[1] == 0:
            return np.zeros(len(rows))
        sub = self.cov[rows[:, :, None], rows[:, None, :]]
        return _prefix_half_logdets(sub, self.noise_var)[:, -1]

    def prefix_log_rewards(self, actions) -> np.ndarray:
        """Log reward of every prefix of each action sequence, shape (S, k+1)."""
        rows = np.asarray(actions, dtype=np.int64)
        sub = self.cov[rows[:, :, None], rows[:, None, :]]
        return _prefix_half_logdets(sub, self.noise_var) / self.spec.temperature

    def fl_gain(self, indices, added: int) -> float:
        s = tuple(indices)
        if added in s:
            raise ValueError(f"index {added} already in state")
        return self.log_reward(s + (added,)) - self.log_reward(s)

    def bald_scores(self) -> np.ndarray:
        var = np.clip(np.diag(self.cov), 0.0, None)
        return 0.5 * np.log1p(var / self.noise_var)


def state_log_reward(state, model: RewardModel) -> float:
    return model.log_reward(state.indices)


def fl_gain(state, added_index: int, model: RewardModel) -> float:
    return model.fl_gain(state.indices, added_index)


def bald_scores(model: RewardModel) -> np.ndarray:
    return model.bald_scores()
