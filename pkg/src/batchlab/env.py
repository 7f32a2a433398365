"""Batch-construction DAG.

States are sets of pool positions stored as sorted tuples, so two
trajectories reaching the same set reach an equal (and equally hashed)
state.  A state with ``capacity`` elements is terminal; there is no stop
action.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field


class EnvError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class BatchState:
    indices: tuple[int, ...] = ()
    capacity: int = field(default=1, compare=False)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if list(idx) != sorted(set(idx)):
            idx = tuple(sorted(idx))
            if len(set(idx)) != len(idx):
                raise EnvError(f"duplicate indices in {self.indices}")
        if len(idx) > self.capacity:
            raise EnvError(f"{len(idx)} indices exceed capacity {self.capacity}")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, i) -> bool:
        return i in self.indices

    @property
    def is_terminal(self) -> bool:
        return len(self.indices) == self.capacity


@dataclass(frozen=True)
class Trajectory:
    states: tuple[BatchState, ...]
    actions: tuple[int, ...]

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise EnvError("a trajectory needs one more state than actions")
        for s, a, s2 in zip(self.states, self.actions, self.states[1:]):
            if set(s2.indices) - set(s.indices) != {a} or len(s2) != len(s) + 1:
                raise EnvError(f"action {a} does not lead from {s.indices} to {s2.indices}")


@dataclass(frozen=True)
class BatchEnv:
    """Set lattice over ``n`` pool positions with batches of size ``batch_size``."""

    n: int
    batch_size: int

    def __post_init__(self):
        if not 1 <= self.batch_size <= self.n:
            raise EnvError(f"batch size {self.batch_size} must lie in [1, pool size {self.n}]")

    def initial_state(self) -> BatchState:
        return BatchState((), self.batch_size)

    def allowed_actions(self, s: BatchState) -> list[int]:
        if s.is_terminal:
            return []
        taken = set(s.indices)
        return [i for i in range(self.n) if i not in taken]

    def apply(self, s: BatchState, a: int) -> BatchState:
        if s.is_terminal:
            raise EnvError(f"state {s.indices} is terminal")
        if not 0 <= a < self.n:
            raise EnvError(f"action {a} outside pool of size {self.n}")
        if a in s.indices:
            raise EnvError(f"index {a} already in state {s.indices}")
        idx = list(s.indices)
        bisect.insort(idx, a)
        return BatchState(tuple(idx), s.capacity)

    def children(self, s: BatchState) -> list[tuple[BatchState, int]]:
        return [(self.apply(s, a), a) for a in self.allowed_actions(s)]

    def trajectory(self, actions) -> Trajectory:
        states = [self.initial_state()]
        for a in actions:
            states.append(self.apply(states[-1], a))
        return Trajectory(tuple(states), tuple(int(a) for a in actions))


def initial_state(capacity: int) -> BatchState:
    return BatchState((), capacity)


def parents(s: BatchState) -> list[tuple[BatchState, int]]:
    """Every (parent, removed index) pair, ordered by removed index."""
    return [
        (BatchState(s.indices[:k] + s.indices[k + 1:], s.capacity), i)
        for k, i in enumerate(s.indices)
    ]


def count_trajectories(s: BatchState) -> int:
    return math.factorial(len(s))
