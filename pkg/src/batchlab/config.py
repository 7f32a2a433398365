"""Flat, typed run configuration.

File format: one ``key = value`` per line, ``#`` starts a comment, blank
lines ignored.  Keys are the field names of :class:`Config`; values are parsed
with the field's type.  Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import torch

from .baselines import STRATEGIES
from .trainer import TrainerConfig

log = logging.getLogger(__name__)

TRANSFER_MODES = ("reinit", "continue", "lookahead")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    seed: int = 0
    # data
    pool_size: int = 2000
    noise_scale: float = 0.1
    test_size: int = 1000
    # active learning
    seed_size: int = 10
    query_size: int = 10
    al_steps: int = 5
    strategy: str = "gfn"
    strategies: str = "gfn,batchbald,bald,random"
    n_seeds: int = 5
    inference_samples: int = 20
    lookahead_samples: int = 0
    transfer_mode: str = "reinit"
    # reward
    temperature: float = 0.1
    temperatures: str = "1,0.1,0.01"
    sweep_runs: int = 10
    covariance: str = "posterior"
    stochastic_bald_temp: float = 1.0
    # GFN training
    lam: float = 0.9
    epsilon: float = 0.1
    lr: float = 0.001
    traj_batch_size: int = 8
    iterations: int = 5000
    warm_iterations: int = 1000
    lookahead_iterations: int = 200
    transfer_iterations: int = 2000
    checkpoint_every: int = 50
    # policy network
    hidden: int = 256
    encoder_layers: int = 2
    trunk_layers: int = 1
    # multiplier on forward logits and log flow; "auto" = min(1/T, output_scale_cap)
    output_scale: str = "auto"
    output_scale_cap: float = 10.0
    # temperatures below anneal_from are reached gradually (0 disables)
    anneal_from: float = 0.0
    anneal_fraction: float = 0.5
    dtype: str = "float64"
    train_context: str = "auto"
    # GP
    gp_epochs: int = 1000
    gp_lr: float = 0.1
    nu: float = 2.5
    lookahead_refit: bool = True
    # oracle
    enum_cap: int = 1_000_000

    def __post_init__(self):
        problems = []
        if self.pool_size < 1:
            problems.append(f"pool_size must be >= 1 (got {self.pool_size})")
        if self.query_size < 1:
            problems.append(f"query_size must be >= 1 (got {self.query_size})")
        if self.query_size > self.pool_size:
            problems.append(f"query_size={self.query_size} exceeds pool_size={self.pool_size}")
        if self.seed_size + self.al_steps * self.query_size > self.pool_size:
            problems.append(
                f"seed_size + al_steps * query_size = "
                f"{self.seed_size + self.al_steps * self.query_size} exceeds pool_size={self.pool_size}")
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy {self.strategy!r} not one of {STRATEGIES}")
        for s in self.strategy_list:
            if s not in STRATEGIES:
                problems.append(f"strategies entry {s!r} not one of {STRATEGIES}")
        if self.transfer_mode not in TRANSFER_MODES:
            problems.append(f"transfer_mode {self.transfer_mode!r} not one of {TRANSFER_MODES}")
        if self.lookahead_samples < 0:
            problems.append("lookahead_samples must be >= 0")
        if self.transfer_mode == "lookahead" and self.strategy != "gfn":
            problems.append("transfer_mode=lookahead requires strategy=gfn")
        if self.temperature <= 0 or any(t <= 0 for t in self.temperature_list):
            problems.append("temperatures must be positive")
        if self.covariance not in ("posterior", "prior"):
            problems.append(f"covariance must be posterior or prior (got {self.covariance!r})")
        if self.dtype not in ("float64", "float32"):
            problems.append(f"dtype must be float64 or float32 (got {self.dtype!r})")
        if self.trunk_layers < 1 or self.encoder_layers < 1 or self.hidden < 1:
            problems.append("hidden, encoder_layers and trunk_layers must be >= 1")
        if self.output_scale != "auto":
            try:
                if not float(self.output_scale) > 0:
                    raise ValueError
            except ValueError:
                problems.append(f"output_scale must be 'auto' or a positive number (got {self.output_scale!r})")
        if not self.output_scale_cap > 0:
            problems.append("output_scale_cap must be positive")
        if self.anneal_from < 0 or not 0 <= self.anneal_fraction <= 1:
            problems.append("anneal_from must be >= 0 and anneal_fraction in [0, 1]")
        if self.train_context not in ("auto", "true", "false"):
            problems.append("train_context must be auto, true or false")
        try:
            self.trainer()
        except ValueError as e:
            problems.append(str(e))
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def strategy_list(self) -> list[str]:
        return [s.strip() for s in self.strategies.split(",") if s.strip()]

    @property
    def temperature_list(self) -> list[float]:
        return [float(t) for t in self.temperatures.split(",") if t.strip()]

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    @property
    def use_train_context(self) -> bool:
        if self.train_context == "auto":
            return self.transfer_mode != "reinit"
        return self.train_context == "true"

    def net_output_scale(self, temperature: float | None = None) -> float:
        t = self.temperature if temperature is None else temperature
        if self.output_scale == "auto":
            return min(1.0 / t, self.output_scale_cap)
        return float(self.output_scale)

    def trainer(self, iterations: int | None = None) -> TrainerConfig:
        return TrainerConfig(self.lam, self.epsilon, self.lr, self.traj_batch_size,
                             self.iterations if iterations is None else iterations,
                             self.anneal_from, self.anneal_fraction)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw.replace("_", ""))
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_config(path=None, overrides: dict | None = None) -> Config:
    """Defaults <- config file <- overrides; every override is logged."""
    known = {f.name: f.type for f in fields(Config)}
    raw: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        raw.update(parse_text(p.read_text()))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        log.info("override %s = %s", k, v)
        raw[k] = str(v) if not isinstance(v, bool) else _fmt(v)
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: _coerce(k, known[k], v) for k, v in raw.items()}
    return Config(**values)
