"""Exact Gaussian-process regression with a Matern kernel.

Values (posterior, evidence) are computed in numpy float64.  Hyperparameter
fitting runs Adam on a torch float64 copy of the evidence so gradients come
from reverse-mode autodiff.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import torch
import torch.nn.functional as F

from .data import TrainSet

log = logging.getLogger(__name__)

JITTER_START = 1e-8
JITTER_MAX = 1e-4
# noise floor applied inside the fitting transform only
NOISE_FLOOR = 1e-6


class GPError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelParams:
    lengthscale: float = 1.0
    outputscale: float = 1.0
    noise_var: float = 0.1
    mean_const: float = 0.0
    nu: float = 2.5

    def __post_init__(self):
        for name in ("lengthscale", "outputscale", "noise_var"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.nu not in (0.5, 1.5, 2.5):
            raise ValueError(f"nu must be one of 0.5, 1.5, 2.5, got {self.nu}")


@dataclass(frozen=True)
class GPPosterior:
    mean: np.ndarray
    cov: np.ndarray
    noise_var: float

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


def _matern_from_dist(d, nu, xp):
    if nu == 0.5:
        return xp.exp(-d)
    if nu == 1.5:
        r = math.sqrt(3.0) * d
        return (1.0 + r) * xp.exp(-r)
    r = math.sqrt(5.0) * d
    return (1.0 + r + r * r / 3.0) * xp.exp(-r)


def matern_kernel(x, x2, p: KernelParams):
    """k(x, x') for scalars, or the cross-covariance matrix for 1-D arrays."""
    a = np.atleast_1d(np.asarray(x, dtype=np.float64))
    b = np.atleast_1d(np.asarray(x2, dtype=np.float64))
    d = np.abs(a[:, None] - b[None, :]) / p.lengthscale
    k = p.outputscale * _matern_from_dist(d, p.nu, np)
    if np.ndim(x) == 0 and np.ndim(x2) == 0:
        return float(k[0, 0])
    return k


def stable_cholesky(a: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Lower Cholesky factor, adding diagonal jitter only if needed.

    Jitter starts at ``JITTER_START * scale`` and grows tenfold up to
    ``JITTER_MAX * scale``.
    """
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START * scale
    n = a.shape[0]
    while jitter <= JITTER_MAX * scale * (1 + 1e-9):
        log.warning("cholesky failed, retrying with jitter %.1e", jitter)
        try:
            return np.linalg.cholesky(a + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter *= 10
    eig = np.linalg.eigvalsh((a + a.T) / 2)
    raise GPError(
        f"matrix of size {n} not positive definite after jitter {JITTER_MAX * scale:.1e}; "
        f"eigenvalue range [{eig.min():.3e}, {eig.max():.3e}]"
    )


def posterior(train: TrainSet, p: KernelParams, queries) -> GPPosterior:
    q = np.asarray(queries, dtype=np.float64)
    if q.size == 0:
        raise ValueError("queries must be non-empty")
    kqq = matern_kernel(q, q, p)
    if len(train) == 0:
        return GPPosterior(np.full(q.shape, p.mean_const), kqq, p.noise_var)
    kxx = matern_kernel(train.x, train.x, p) + p.noise_var * np.eye(len(train))
    chol = stable_cholesky(kxx, p.outputscale)
    kxq = matern_kernel(train.x, q, p)
    alpha = sla.cho_solve((chol, True), train.y - p.mean_const)
    v = sla.solve_triangular(chol, kxq, lower=True)
    cov = kqq - v.T @ v
    cov = 0.5 * (cov + cov.T)
    return GPPosterior(p.mean_const + kxq.T @ alpha, cov, p.noise_var)


def log_marginal_likelihood(train: TrainSet, p: KernelParams) -> float:
    if len(train) == 0:
        raise ValueError("need at least one training point")
    kxx = matern_kernel(train.x, train.x, p) + p.noise_var * np.eye(len(train))
    chol = stable_cholesky(kxx, p.outputscale)
    r = train.y - p.mean_const
    z = sla.solve_triangular(chol, r, lower=True)
    n = len(train)
    return float(-0.5 * z @ z - np.log(np.diag(chol)).sum() - 0.5 * n * math.log(2 * math.pi))


def sample_labels(post: GPPosterior, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Joint draw(s) from N(mean, cov + noise_var * I)."""
    n = len(post.mean)
    c = post.cov + post.noise_var * np.eye(n)
    # eigendecomposition tolerates the singular cov = 0 case
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    root = v * np.sqrt(np.clip(w, 0.0, None))
    shape = (n,) if size is None else (size, n)
    z = rng.standard_normal(shape)
    return post.mean + z @ root.T


# --- fitting -----------------------------------------------------------------


def _softplus_inv(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class _RawParams(torch.nn.Module):
    def __init__(self, init: KernelParams):
        super().__init__()
        dt = torch.float64
        self.nu = init.nu
        self.raw_lengthscale = torch.nn.Parameter(torch.tensor(_softplus_inv(init.lengthscale), dtype=dt))
        self.raw_outputscale = torch.nn.Parameter(torch.tensor(_softplus_inv(init.outputscale), dtype=dt))
        noise = max(init.noise_var - NOISE_FLOOR, 1e-12)
        self.raw_noise = torch.nn.Parameter(torch.tensor(_softplus_inv(noise), dtype=dt))
        self.mean_const = torch.nn.Parameter(torch.tensor(init.mean_const, dtype=dt))

    def constrained(self):
        return (F.softplus(self.raw_lengthscale), F.softplus(self.raw_outputscale),
                F.softplus(self.raw_noise) + NOISE_FLOOR, self.mean_const)

    def to_params(self) -> KernelParams:
        ls, os_, nv, m = (float(t.detach()) for t in self.constrained())
        return KernelParams(ls, os_, nv, m, self.nu)


def torch_log_marginal_likelihood(raw: _RawParams, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    ls, os_, nv, m = raw.constrained()
    d = (x[:, None] - x[None, :]).abs() / ls
    eye = torch.eye(len(x), dtype=x.dtype)
    k = os_ * _matern_from_dist(d, raw.nu, torch) + nv * eye
    chol, info = torch.linalg.cholesky_ex(k)
    jitter = JITTER_START * float(os_.detach())
    while info.item() != 0:
        if jitter > JITTER_MAX * float(os_.detach()) * (1 + 1e-9):
            raise torch.linalg.LinAlgError("cholesky failed after maximum jitter")
        log.warning("cholesky failed during fitting, retrying with jitter %.1e", jitter)
        chol, info = torch.linalg.cholesky_ex(k + jitter * eye)
        jitter *= 10
    r = (y - m)[:, None]
    z = torch.linalg.solve_triangular(chol, r, upper=False)
    return -0.5 * (z * z).sum() - torch.log(torch.diagonal(chol)).sum() - 0.5 * len(x) * math.log(2 * math.pi)


def fit_hyperparams(train: TrainSet, epochs: int = 1000, lr: float = 0.1,
                    init: KernelParams | None = None, trace: list | None = None) -> KernelParams:
    """Adam on the negative log evidence (averaged over points).

    If ``trace`` is a list, the log evidence before each step is appended.
    """
    init = init or KernelParams()
    if len(train) == 0:
        raise ValueError("need at least one training point")
    if epochs == 0:
        return init
    raw = _RawParams(init)
    opt = torch.optim.Adam(raw.parameters(), lr=lr)
    x = torch.as_tensor(train.x, dtype=torch.float64)
    y = torch.as_tensor(train.y, dtype=torch.float64)
    for epoch in range(epochs):
        opt.zero_grad()
        try:
            loss = -torch_log_marginal_likelihood(raw, x, y) / len(x)
        except torch.linalg.LinAlgError as e:
            raise GPError(f"cholesky failed at epoch {epoch} with params {raw.to_params()}") from e
        if trace is not None:
            trace.append(-float(loss.detach()) * len(x))
        loss.backward()
        opt.step()
    return raw.to_params()


@dataclass(frozen=True)
class FittedGP:
    """Kernel parameters plus the data they condition on."""

    params: KernelParams
    train: TrainSet

    def posterior(self, queries) -> GPPosterior:
        return posterior(self.train, self.params, queries)

    def save(self, path) -> None:
        rec = {"format": "batchlab-gp/1", "params": asdict(self.params),
               "train_ids": [int(i) for i in self.train.ids]}
        Path(path).write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")

    @staticmethod
    def load_params(path) -> tuple[KernelParams, list[int]]:
        rec = json.loads(Path(path).read_text())
        return KernelParams(**rec["params"]), rec["train_ids"]


def fit(train: TrainSet, epochs: int = 1000, lr: float = 0.1,
        init: KernelParams | None = None) -> FittedGP:
    return FittedGP(fit_hyperparams(train, epochs, lr, init), train)
