"""Subtrajectory-balance training with forward-looking flows, and inference.

With state log rewards ``l(s)`` the network predicts a residual flow
``log F~(s)`` and the flow entering every balance constraint is
``log F(s) = log F~(s) + l(s)``.  The terminal residual is pinned to zero,
so the terminal flow is the reward itself.

The network's flow output is further offset by
``log C(N - k, B - k) - log C(B, k)``, the balanced log flow of uniform
forward and backward policies under a constant reward at a state with ``k``
members.  Large pools then start near balance instead of having to learn
flows of tens of nats from a zero-initialised head.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .env import BatchState
from .policy import AdamState, PolicyContext, PolicyNet, adam_step, sample_actions
from .reward import RewardModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainerConfig:
    lam: float = 0.9
    epsilon: float = 0.1
    lr: float = 1e-3
    traj_batch_size: int = 8
    iterations: int = 5000
    # below this temperature the reward is annealed into place (0 disables)
    anneal_from: float = 0.0
    anneal_fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.traj_batch_size < 1 or self.iterations < 0 or self.lr <= 0:
            raise ValueError("traj_batch_size >= 1, iterations >= 0 and lr > 0 required")
        if self.anneal_from < 0 or not 0 <= self.anneal_fraction <= 1:
            raise ValueError("anneal_from must be >= 0 and anneal_fraction in [0, 1]")

    def reward_factor(self, iteration: int, temperature: float) -> float:
        """Multiplier on log rewards at ``iteration``.

        If ``temperature < anneal_from``, the effective temperature moves
        geometrically from ``anneal_from`` to ``temperature`` over the first
        ``anneal_fraction`` of the iterations and stays there afterwards.
        """
        if not self.anneal_from or temperature >= self.anneal_from:
            return 1.0
        span = self.anneal_fraction * self.iterations
        frac = 1.0 if span <= 0 else min(iteration / span, 1.0)
        t_eff = self.anneal_from ** (1 - frac) * temperature ** frac
        return temperature / t_eff


def log_count_offset(n: int, k: int, batch_size: int) -> float:
    """log C(n - k, B - k) - log C(B, k).

    Completions of a size-k state, times the chance that a uniform backward
    walk from one of them passes through it.
    """
    lg = math.lgamma
    completions = lg(n - k + 1) - lg(batch_size - k + 1) - lg(n - batch_size + 1)
    return completions - (lg(batch_size + 1) - lg(k + 1) - lg(batch_size - k + 1))


def subtb_weights(length: int, lam: float) -> torch.Tensor:
    """Weight lam**(j-i) for every pair i < j of a trajectory with ``length`` states."""
    i = torch.arange(length)
    gap = (i[None, :] - i[:, None]).to(torch.float64)
    return torch.where(gap > 0, lam**gap, torch.zeros_like(gap))


def subtb_fl_loss(log_pf: torch.Tensor, log_pb: torch.Tensor, log_flow: torch.Tensor,
                  log_reward: torch.Tensor, lam: float) -> torch.Tensor:
    """Normalised SubTB loss of each trajectory in a stack.

    Shapes: ``log_pf``, ``log_pb`` (S, B) for the B transitions;
    ``log_flow`` (S, B) residual flows of the non-terminal states;
    ``log_reward`` (S, B+1) state log rewards.  Returns (S,).
    """
    s, b = log_pf.shape
    zero = torch.zeros(s, 1, dtype=log_pf.dtype)
    flow = torch.cat([log_flow, zero], 1) + log_reward
    cpf = torch.cat([zero, torch.cumsum(log_pf, 1)], 1)
    cpb = torch.cat([zero, torch.cumsum(log_pb, 1)], 1)
    # A_ij = u_i - u_j
    u = flow - cpf + cpb
    resid = u[:, :, None] - u[:, None, :]
    w = subtb_weights(b + 1, lam).to(log_pf.dtype)
    return (w * resid**2).sum((1, 2)) / w.sum()


@dataclass
class Rollout:
    actions: np.ndarray  # (S, B)
    log_pf: torch.Tensor
    log_pb: torch.Tensor
    log_flow: torch.Tensor


def rollout(net: PolicyNet, ctx: PolicyContext, batch_size: int, n_traj: int, epsilon: float,
            rng: np.random.Generator, with_backward: bool = True) -> Rollout:
    """Sample ``n_traj`` trajectories, keeping the graph for the loss.

    Actions come from the epsilon-mixed policy; stored log-probabilities are
    those of the unmixed forward policy.
    """
    prep = net.prepare(ctx)
    rows = torch.arange(n_traj)
    actions = np.zeros((n_traj, batch_size), dtype=np.int64)
    lpf, lpb, lflow = [], [], []
    for k in range(batch_size):
        members = torch.as_tensor(actions[:, :k])
        fwd, bwd, flow = net.evaluate(prep, members)
        if k > 0:
            lpb.append(torch.log_softmax(bwd, -1)[:, k - 1])
        lflow.append(flow + log_count_offset(ctx.n, k, batch_size))
        a = sample_actions(fwd.detach(), epsilon, rng)
        actions[:, k] = a
        lpf.append(torch.log_softmax(fwd, -1)[rows, a])
    if with_backward:
        _, bwd, _ = net.evaluate(prep, torch.as_tensor(actions), forward=False)
        lpb.append(torch.log_softmax(bwd, -1)[:, -1])
    return Rollout(actions, torch.stack(lpf, 1), torch.stack(lpb, 1) if lpb else None,
                   torch.stack(lflow, 1))


@dataclass
class TrainResult:
    net: PolicyNet
    adam: AdamState
    trace: list[dict] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([r["mean_loss"] for r in self.trace])

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.trace:
                fh.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def train(net: PolicyNet, ctx: PolicyContext, model: RewardModel, batch_size: int,
          cfg: TrainerConfig, rng: np.random.Generator, adam: AdamState | None = None,
          callback=None, callback_every: int = 0) -> TrainResult:
    """Run ``cfg.iterations`` Adam steps on the mean per-trajectory SubTB loss.

    ``callback(iteration, net)`` runs before the first step and after every
    ``callback_every`` steps, if given.
    """
    params = list(net.parameters())
    adam = adam or AdamState.zeros_like(params)
    result = TrainResult(net, adam)
    if callback is not None:
        callback(0, net)
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        ro = rollout(net, ctx, batch_size, cfg.traj_batch_size, cfg.epsilon, rng)
        factor = cfg.reward_factor(it, model.spec.temperature)
        ell = torch.as_tensor(model.prefix_log_rewards(ro.actions) * factor, dtype=net.dtype)
        loss = subtb_fl_loss(ro.log_pf, ro.log_pb, ro.log_flow, ell, cfg.lam).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite SubTB loss at iteration {it}")
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        adam_step(params, grads, adam, cfg.lr)
        result.trace.append({"iter": it, "mean_loss": float(loss.detach()),
                             "mean_sampled_log_reward": float(ell[:, -1].mean()) / factor})
        if callback is not None and callback_every and (it + 1) % callback_every == 0:
            callback(it + 1, net)
        if (it + 1) % 500 == 0:
            log.info("iter %d loss %.4g (%.1fs)", it + 1, float(loss.detach()), time.perf_counter() - t0)
    return result


@torch.no_grad()
def sample_batches(net: PolicyNet, ctx: PolicyContext, model: RewardModel, batch_size: int,
                   k: int, rng: np.random.Generator) -> list[tuple[BatchState, float]]:
    """``k`` independent draws from the forward policy, without exploration.

    Costs exactly ``k * batch_size`` state evaluations.
    """
    if k == 0:
        return []
    ro = rollout(net, ctx, batch_size, k, 0.0, rng, with_backward=False)
    jmi = model.jmi_many(np.sort(ro.actions, axis=1))
    out = []
    for acts, j in zip(ro.actions, jmi):
        out.append((BatchState(tuple(sorted(int(a) for a in acts)), batch_size), float(j) / model.spec.temperature))
    return out


def select_query(samples) -> BatchState:
    """Highest log reward; ties go to the lexicographically smallest batch."""
    if not samples:
        raise ValueError("no samples to select from")
    best = max(r for _, r in samples)
    return min(s for s, r in samples if r == best)
