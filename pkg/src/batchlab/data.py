"""Toy 1-D regression data: pool, test set and seed-set draws.

Pool points carry stable integer ids (their position in the original pool).
Hidden labels live in a :class:`LabelOracle` and never inside a
:class:`PoolSet`, so an acquisition strategy that only sees the pool cannot
read them.

Snapshot format (``write_snapshot``): UTF-8 text, one JSON object per line,
``\\n`` terminated, keys sorted, no whitespace, floats in Python's shortest
round-trip repr::

    {"index":0,"split":"pool","x":0.345584192064786,"y_hidden":-0.62...}

``split`` is one of ``pool``, ``train`` or ``test``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod

POLY = (-0.6667, -0.6012, -1.0172, -0.7687, 0.0, 1.4680, -0.1678)
DEFAULT_NOISE = 0.1


def target_mean(x):
    """Noiseless generator f(x) = poly(x) * sin(pi x) * exp(-x^2 / 2)."""
    x = np.asarray(x, dtype=np.float64)
    poly = np.polynomial.polynomial.polyval(x, POLY)
    out = poly * np.sin(np.pi * x) * np.exp(-0.5 * x**2)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PoolSet:
    """Unlabelled pool.  ``ids[i]`` is the stable identifier of ``x[i]``."""

    ids: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        if len(self.ids) != len(self.x):
            raise ValueError("ids and x differ in length")

    def __len__(self) -> int:
        return len(self.x)

    def remove(self, positions) -> "PoolSet":
        keep = np.ones(len(self), dtype=bool)
        keep[np.asarray(positions, dtype=int)] = False
        return PoolSet(self.ids[keep], self.x[keep])


@dataclass(frozen=True)
class TrainSet:
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def empty(cls) -> "TrainSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))

    def extend(self, ids, x, y) -> "TrainSet":
        return TrainSet(
            np.concatenate([self.ids, np.asarray(ids, dtype=np.int64)]),
            np.concatenate([self.x, np.asarray(x, dtype=np.float64)]),
            np.concatenate([self.y, np.asarray(y, dtype=np.float64)]),
        )


@dataclass(frozen=True)
class LabelOracle:
    """Holds the hidden labels of a pool, keyed by stable id."""

    _y: np.ndarray = field(repr=False)

    def label(self, ids) -> np.ndarray:
        return self._y[np.asarray(ids, dtype=np.int64)].copy()


def _draw(n: int, noise_scale: float, seed: int, tag: str):
    if n < 1:
        raise ValueError(f"need at least one point, got n={n}")
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
    x = rng_mod.stream(seed, tag, "x").standard_normal(n)
    eps = rng_mod.stream(seed, tag, "noise").standard_normal(n)
    return x, target_mean(x) + noise_scale * eps


def sample_pool(n: int, noise_scale: float = DEFAULT_NOISE, rng_seed: int = 0):
    """Draw a pool of ``n`` points with x ~ N(0, 1).

    Returns ``(pool, oracle)``.  ``noise_scale`` is the standard deviation of
    the additive label noise.
    """
    x, y = _draw(n, noise_scale, rng_seed, "pool")
    return PoolSet(np.arange(n, dtype=np.int64), x), LabelOracle(y)


def sample_test_set(n: int, rng_seed: int, noise_scale: float = DEFAULT_NOISE) -> TrainSet:
    x, y = _draw(n, noise_scale, rng_seed, "test")
    return TrainSet(np.arange(n, dtype=np.int64), x, y)


def draw_seed_set(pool: PoolSet, oracle: LabelOracle, b0: int, rng: np.random.Generator):
    """Move ``b0`` uniformly chosen pool points into a labelled train set."""
    if b0 > len(pool):
        raise ValueError(f"seed size {b0} exceeds pool size {len(pool)}")
    if b0 < 0:
        raise ValueError("seed size must be non-negative")
    pos = np.sort(rng.choice(len(pool), size=b0, replace=False))
    ids = pool.ids[pos]
    train = TrainSet.empty().extend(ids, pool.x[pos], oracle.label(ids))
    return train, pool.remove(pos)


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_snapshot(path, pool: PoolSet, oracle: LabelOracle, train: TrainSet | None = None,
                   test: TrainSet | None = None) -> None:
    lines = []
    for i, x in zip(pool.ids, pool.x):
        lines.append({"index": int(i), "split": "pool", "x": float(x),
                      "y_hidden": float(oracle.label([i])[0])})
    for split, ts in (("train", train), ("test", test)):
        if ts is None:
            continue
        for i, x, y in zip(ts.ids, ts.x, ts.y):
            lines.append({"index": int(i), "split": split, "x": float(x), "y_hidden": float(y)})
    Path(path).write_text("".join(_dumps(r) + "\n" for r in lines), encoding="utf-8")


def read_snapshot(path) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {"pool": [], "train": [], "test": []}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out[rec["split"]].append(rec)
    return out
