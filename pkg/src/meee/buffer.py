"""FIFO replay buffers for real transitions and weighted imagined transitions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from meee.envs import Transition
from meee.nn import ContractError

WEIGHT_MIN, WEIGHT_MAX = 0.5, 1.0


@dataclass(frozen=True)
class WeightedTransition:
    transition: Transition
    weight: float

    def __post_init__(self):
        if not (np.isfinite(self.weight) and WEIGHT_MIN <= self.weight <= WEIGHT_MAX):
            raise ContractError(f"transition weight {self.weight} outside [0.5, 1.0]")


@dataclass
class Batch:
    """Column-major view of a minibatch; ``w`` holds per-sample loss weights."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    w: np.ndarray

    def __len__(self) -> int:
        return len(self.r)

    @classmethod
    def concat(cls, parts: list["Batch"]) -> "Batch":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("s", "a", "r", "s_next", "done", "w")))


class EnvBuffer:
    """Ring buffer of :class:`Transition`; pushing past capacity evicts the oldest."""

    weighted = False

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity <= 0:
            raise ContractError(f"capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._s = np.zeros((capacity, state_dim))
        self._a = np.zeros((capacity, action_dim))
        self._r = np.zeros(capacity)
        self._s_next = np.zeros((capacity, state_dim))
        self._done = np.zeros(capacity, dtype=bool)
        self._w = np.ones(capacity)
        self._ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def _check(self, t: Transition) -> None:
        s, a, s_next = np.asarray(t.s), np.asarray(t.a), np.asarray(t.s_next)
        if s.shape != (self.state_dim,) or s_next.shape != (self.state_dim,) or a.shape != (self.action_dim,):
            raise ContractError(
                f"transition shapes s{s.shape} a{a.shape} s'{s_next.shape} do not match "
                f"state_dim={self.state_dim}, action_dim={self.action_dim}"
            )
        if not (np.isfinite(s).all() and np.isfinite(a).all() and np.isfinite(s_next).all() and np.isfinite(t.r)):
            raise ContractError("transition contains non-finite entries")

    def _write(self, t: Transition, w: float) -> None:
        i = self._ptr
        self._s[i] = t.s
        self._a[i] = t.a
        self._r[i] = t.r
        self._s_next[i] = t.s_next
        self._done[i] = t.done
        self._w[i] = w
        self._ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push(self, item: Transition) -> None:
        self._check(item)
        self._write(item, 1.0)

    def push_arrays(self, s, a, r, s_next, done, w=None) -> None:
        """Push a block of items (oldest first) with the same checks as :meth:`push`."""
        s, a, s_next = (np.asarray(x, dtype=np.float64) for x in (s, a, s_next))
        r = np.asarray(r, dtype=np.float64)
        done = np.asarray(done, dtype=bool)
        n = len(r)
        if s.shape != (n, self.state_dim) or s_next.shape != (n, self.state_dim) or a.shape != (n, self.action_dim):
            raise ContractError("block shapes do not match the buffer's state/action dimensions")
        if not (np.isfinite(s).all() and np.isfinite(a).all() and np.isfinite(s_next).all() and np.isfinite(r).all()):
            raise ContractError("block contains non-finite entries")
        if self.weighted:
            w = np.asarray(w, dtype=np.float64)
            if w.shape != (n,) or not (np.isfinite(w).all() and np.all((w >= WEIGHT_MIN) & (w <= WEIGHT_MAX))):
                raise ContractError("block weights must be finite and lie in [0.5, 1.0]")
        else:
            w = np.ones(n)
        if n > self.capacity:
            s, a, r, s_next, done, w = (x[-self.capacity :] for x in (s, a, r, s_next, done, w))
            n = self.capacity
        idx = (self._ptr + np.arange(n)) % self.capacity
        self._s[idx], self._a[idx], self._r[idx] = s, a, r
        self._s_next[idx], self._done[idx], self._w[idx] = s_next, done, w
        self._ptr = int((self._ptr + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def _order(self) -> np.ndarray:
        # physical slots in insertion order, oldest first
        start = (self._ptr - self.size) % self.capacity
        return (start + np.arange(self.size)) % self.capacity

    def _item(self, i: int):
        return Transition(self._s[i].copy(), self._a[i].copy(), float(self._r[i]), self._s_next[i].copy(), bool(self._done[i]))

    def __iter__(self) -> Iterator:
        for i in self._order():
            yield self._item(int(i))

    def _draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ContractError("cannot sample from an empty buffer")
        if n < 0:
            raise ContractError(f"sample size must be nonnegative, got {n}")
        return rng.integers(0, self.size, size=n)

    def sample_batch(self, n: int, rng: np.random.Generator) -> list:
        """``n`` items drawn uniformly with replacement."""
        if n < 1:
            raise ContractError(f"batch size must be >= 1, got {n}")
        return [self._item(int(i)) for i in self._draw(n, rng)]

    def sample_arrays(self, n: int, rng: np.random.Generator) -> Batch:
        """Same draw as :meth:`sample_batch` but returned as stacked arrays."""
        if n < 1:
            raise ContractError(f"batch size must be >= 1, got {n}")
        idx = self._draw(n, rng)
        return self.take(idx)

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(
            self._s[idx], self._a[idx], self._r[idx], self._s_next[idx], self._done[idx], self._w[idx]
        )

    def arrays(self) -> Batch:
        """Every stored item in insertion order."""
        return self.take(self._order())

    def dump_csv(self, path: str | Path) -> None:
        """Write one row per item: ``s_*, a_*, r, s_next_*, done[, weight]``."""
        header = (
            [f"s_{j}" for j in range(self.state_dim)]
            + [f"a_{j}" for j in range(self.action_dim)]
            + ["r"]
            + [f"s_next_{j}" for j in range(self.state_dim)]
            + ["done"]
            + (["weight"] if self.weighted else [])
        )
        b = self.arrays()
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for k in range(self.size):
                row = [*map(repr, b.s[k].tolist()), *map(repr, b.a[k].tolist()), repr(float(b.r[k]))]
                row += [*map(repr, b.s_next[k].tolist()), int(b.done[k])]
                if self.weighted:
                    row.append(repr(float(b.w[k])))
                writer.writerow(row)


class ModelBuffer(EnvBuffer):
    """Ring buffer of :class:`WeightedTransition`; every stored weight lies in ``[0.5, 1]``."""

    weighted = True

    def push(self, item: WeightedTransition) -> None:
        if not isinstance(item, WeightedTransition):
            raise ContractError("ModelBuffer accepts WeightedTransition items only")
        if not (np.isfinite(item.weight) and WEIGHT_MIN <= item.weight <= WEIGHT_MAX):
            raise ContractError(f"transition weight {item.weight} outside [0.5, 1.0]")
        self._check(item.transition)
        self._write(item.transition, float(item.weight))

    def _item(self, i: int):
        return WeightedTransition(super()._item(i), float(self._w[i]))


def sample_states(buffer: EnvBuffer, m: int, rng: np.random.Generator) -> list[np.ndarray]:
    """``m`` start states (the ``s`` field) drawn uniformly with replacement."""
    if m == 0:
        return []
    idx = buffer._draw(m, rng)
    return [buffer._s[i].copy() for i in idx]
