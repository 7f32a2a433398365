"""Set-invariant policy network.

Every pool point is encoded on its own; the points of the current state are
encoded by a second encoder and summed, as are (optionally) the labelled
train pairs.  A shared trunk layer combines each pool embedding with the
pooled context, and three zero-initialised linear heads read out

* forward logits, one per pool point (points already in the state masked),
* backward logits, one per element of the state,
* the log state flow, from the pooled context alone.

The trunk's first layer is linear in the concatenation [pool point, context],
so its pool half is computed once per parameter snapshot and the per-state
work is one broadcast add, one activation and two dot products.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
NEG_INF = float("-inf")
CHECKPOINT_FORMAT = "batchlab-policy/1"


class NonFiniteError(FloatingPointError):
    pass


def mlp(d_in: int, width: int, layers: int) -> nn.Sequential:
    mods: list[nn.Module] = []
    for i in range(layers):
        mods += [nn.Linear(d_in if i == 0 else width, width), nn.SiLU()]
    return nn.Sequential(*mods)


@dataclass
class PolicyContext:
    """Conditioning data: pool inputs and, when amortising, train pairs."""

    pool_x: torch.Tensor
    train_xy: torch.Tensor | None = None

    @classmethod
    def build(cls, pool_x, train=None) -> "PolicyContext":
        px = torch.as_tensor(np.asarray(pool_x, dtype=np.float64)).reshape(-1, 1)
        txy = None
        if train is not None:
            txy = torch.as_tensor(np.stack([train.x, train.y], axis=1).astype(np.float64)).reshape(-1, 2)
        return cls(px, txy)

    @property
    def n(self) -> int:
        return self.pool_x.shape[0]


@dataclass
class Prepared:
    """Per-snapshot encodings shared by every state evaluated against it."""

    pool_pre: torch.Tensor  # (N, H) trunk pre-activation from the pool half
    state_emb: torch.Tensor  # (N, H) state-encoder embedding of each pool point
    train_ctx: torch.Tensor  # (H,)


@dataclass
class PolicyOutput:
    forward_logits: np.ndarray
    backward_logits: np.ndarray
    log_flow: float
    state: tuple[int, ...] = field(default=())


def _check(name: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {name}")
    return t


class PolicyNet(nn.Module):
    def __init__(self, hidden: int = 256, encoder_layers: int = 2, train_context: bool = False,
                 seed: int = 0, dtype: torch.dtype = DTYPE, trunk_layers: int = 1,
                 output_scale: float = 1.0):
        super().__init__()
        if not output_scale > 0:
            raise ValueError("output_scale must be positive")
        # fixed multiplier on forward logits and log flow, e.g. 1/T
        self.output_scale = float(output_scale)
        self.dtype = dtype
        if trunk_layers < 1:
            raise ValueError("trunk_layers must be >= 1")
        self.arch = {"hidden": hidden, "encoder_layers": encoder_layers, "trunk_layers": trunk_layers,
                     "output_scale": float(output_scale),
                     "train_context": bool(train_context), "activation": "silu",
                     "dtype": str(dtype).replace("torch.", "")}
        g = torch.Generator().manual_seed(int(seed))
        self.pool_encoder = mlp(1, hidden, encoder_layers)
        self.state_encoder = mlp(1, hidden, encoder_layers)
        self.train_encoder = mlp(2, hidden, encoder_layers) if train_context else None
        self.trunk_pool = nn.Linear(hidden, hidden)
        self.trunk_state = nn.Linear(hidden, hidden, bias=False)
        self.trunk_train = nn.Linear(hidden, hidden, bias=False) if train_context else None
        self.act = nn.SiLU()
        # further shared layers after the combining one
        self.trunk_extra = mlp(hidden, hidden, trunk_layers - 1)
        self.head_forward = nn.Linear(hidden, 1)
        self.head_backward = nn.Linear(hidden, 1)
        self.head_flow = nn.Linear(hidden, 1)
        self._init(g)
        self.to(dtype)
        self.eval_count = 0

    def _init(self, g: torch.Generator) -> None:
        with torch.no_grad():
            for name, mod in self.named_modules():
                if not isinstance(mod, nn.Linear):
                    continue
                if name.startswith("head_"):
                    mod.weight.zero_()
                    mod.bias.zero_()
                    continue
                bound = 1.0 / math.sqrt(mod.in_features)
                mod.weight.copy_(torch.empty_like(mod.weight).uniform_(-bound, bound, generator=g) * math.sqrt(3))
                if mod.bias is not None:
                    mod.bias.copy_(torch.empty_like(mod.bias).uniform_(-bound, bound, generator=g))

    # --- evaluation ----------------------------------------------------------

    def prepare(self, ctx: PolicyContext) -> Prepared:
        px = ctx.pool_x.to(self.dtype)
        pool_emb = _check("pool_encoder", self.pool_encoder(px))
        state_emb = _check("state_encoder", self.state_encoder(px))
        pool_pre = self.trunk_pool(pool_emb)
        h = pool_emb.shape[1]
        if self.train_encoder is not None and ctx.train_xy is not None and len(ctx.train_xy):
            tsum = _check("train_encoder", self.train_encoder(ctx.train_xy.to(self.dtype))).sum(0)
            train_ctx = self.trunk_train(tsum)
        else:
            train_ctx = torch.zeros(h, dtype=self.dtype)
        return Prepared(pool_pre, state_emb, train_ctx)

    def evaluate(self, prep: Prepared, members: torch.Tensor, forward: bool = True):
        """Outputs for a stack of S states, each given by k member positions.

        ``members`` is an (S, k) integer tensor.  Returns
        ``(forward_logits, backward_logits, log_flow)`` with shapes (S, N),
        (S, k) and (S,); forward logits of members are ``-inf`` and
        backward logits follow the column order of ``members``.  With
        ``forward=False`` the forward logits are skipped (returned as None)
        and the evaluation is not counted.
        """
        s, k = members.shape
        n = prep.pool_pre.shape[0]
        mask = torch.zeros(s, n, dtype=torch.bool)
        if k:
            mask[torch.arange(s)[:, None], members] = True
        # summing in sorted order makes the pooled context bit-identical per set
        pooled = prep.state_emb[torch.sort(members, dim=1).values].sum(1)
        ctx = self.trunk_state(pooled) + prep.train_ctx
        fwd = None
        if forward:
            self.eval_count += s
            h = self.trunk_extra(self.act(prep.pool_pre.unsqueeze(0) + ctx.unsqueeze(1)))
            fwd = _check("trunk/forward head", self.head_forward(h).squeeze(-1) * self.output_scale)
            fwd = fwd.masked_fill(mask, NEG_INF)
        hm = self.trunk_extra(self.act(prep.pool_pre[members] + ctx.unsqueeze(1)))
        bwd = _check("trunk/backward head", self.head_backward(hm).squeeze(-1))
        flow = self.head_flow(self.trunk_extra(self.act(ctx + self.trunk_pool.bias))).squeeze(-1)
        flow = _check("log_flow head", flow * self.output_scale)
        return fwd, bwd, flow

    def encode(self, ctx: PolicyContext, state) -> PolicyOutput:
        """Single-state convenience wrapper returning numpy arrays."""
        idx = tuple(state.indices) if hasattr(state, "indices") else tuple(sorted(state))
        members = torch.tensor([idx], dtype=torch.long).reshape(1, len(idx))
        with torch.no_grad():
            fwd, bwd, flow = self.evaluate(self.prepare(ctx), members)
        return PolicyOutput(fwd[0].double().numpy().copy(), bwd[0].double().numpy().copy(),
                            float(flow[0]), idx)

    # --- flat parameter view -------------------------------------------------

    def flat_params(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.parameters()).detach().numpy().copy()

    def set_flat_params(self, vec) -> None:
        nn.utils.vector_to_parameters(torch.as_tensor(np.asarray(vec), dtype=self.dtype), self.parameters())

    def partition(self) -> dict[str, tuple[int, int]]:
        """Start/stop offsets of each named parameter block in the flat vector."""
        out, pos = {}, 0
        for name, p in self.named_parameters():
            out[name] = (pos, pos + p.numel())
            pos += p.numel()
        return out


# --- masked softmax helpers ----------------------------------------------------


def log_pf(out: PolicyOutput, action: int) -> float:
    if not np.isfinite(out.forward_logits[action]):
        raise ValueError(f"action {action} is masked")
    lp = torch.log_softmax(torch.as_tensor(out.forward_logits), -1)
    return float(lp[action])


def log_pb(out: PolicyOutput, removed: int) -> float:
    if removed not in out.state:
        raise ValueError(f"{removed} is not an element of the state {out.state}")
    lp = torch.log_softmax(torch.as_tensor(out.backward_logits), -1)
    return float(lp[out.state.index(removed)])


def sample_action(out: PolicyOutput, epsilon: float, rng: np.random.Generator) -> int:
    allowed = np.flatnonzero(np.isfinite(out.forward_logits))
    if len(allowed) == 0:
        raise ValueError("no allowed actions: state is terminal")
    return int(sample_actions(torch.as_tensor(out.forward_logits)[None], epsilon, rng)[0])


def sample_actions(logits: torch.Tensor, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """One draw per row from the epsilon-mixture of the masked softmax and uniform."""
    with torch.no_grad():
        allowed = torch.isfinite(logits)
        p = torch.softmax(logits.double(), -1)
        if epsilon > 0:
            u = allowed.double() / allowed.sum(-1, keepdim=True)
            p = (1 - epsilon) * p + epsilon * u
        p = p.numpy()
    cdf = np.cumsum(p, axis=1)
    r = rng.random(len(p)) * cdf[:, -1]
    a = (cdf > r[:, None]).argmax(axis=1)
    # guard against landing on a zero-probability entry through rounding
    bad = ~allowed.numpy()[np.arange(len(a)), a]
    for i in np.flatnonzero(bad):
        a[i] = np.flatnonzero(allowed[i].numpy())[-1]
    return a


# --- gradients and optimiser ---------------------------------------------------


def gradient(loss_fn, net: nn.Module) -> np.ndarray:
    """Flat reverse-mode gradient of ``loss_fn(net)`` w.r.t. every parameter."""
    net.zero_grad(set_to_none=True)
    loss = loss_fn(net)
    if not torch.is_tensor(loss) or not loss.requires_grad:
        return np.zeros(sum(p.numel() for p in net.parameters()))
    if not torch.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    loss.backward()
    out = []
    for name, p in net.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name}")
        out.append(g.reshape(-1))
    return torch.cat(out).detach().numpy().copy()


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update."""
    b1, b2 = state.betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / c1)


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, net: PolicyNet, adam: AdamState | None = None) -> None:
    """npz archive; ``header`` is a JSON string with format, arch and layout."""
    header = {"format": CHECKPOINT_FORMAT, "arch": net.arch, "partition": net.partition(),
              "adam_t": adam.t if adam else 0}
    arrays = {"header": np.array(json.dumps(header, sort_keys=True)), "params": net.flat_params()}
    if adam is not None:
        arrays["adam_m"] = torch.cat([m.reshape(-1) for m in adam.m]).numpy()
        arrays["adam_v"] = torch.cat([v.reshape(-1) for v in adam.v]).numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[PolicyNet, AdamState | None]:
    with np.load(Path(path)) as z:
        header = json.loads(str(z["header"]))
        if header["format"] != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header['format']}")
        arch = header["arch"]
        net = PolicyNet(arch["hidden"], arch["encoder_layers"], arch["train_context"],
                        dtype=getattr(torch, arch.get("dtype", "float64")), trunk_layers=arch.get("trunk_layers", 1),
                        output_scale=arch.get("output_scale", 1.0))
        net.set_flat_params(z["params"])
        adam = None
        if "adam_m" in z:
            adam = AdamState.zeros_like(list(net.parameters()))
            for buf, key in ((adam.m, "adam_m"), (adam.v, "adam_v")):
                nn.utils.vector_to_parameters(torch.as_tensor(z[key], dtype=net.dtype), buf)
            adam.t = header["adam_t"]
    return net, adam
