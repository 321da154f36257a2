"""Fixed-capacity ring buffer of transitions with uniform sampling."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

DEFAULT_CAPACITY = 10**6


class Transition(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool  # termination only; time-limit truncation is not stored as done


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    @classmethod
    def from_transitions(cls, transitions) -> Batch:
        ts = list(transitions)
        if not ts:
            raise ValueError("batch must not be empty")
        return cls(
            np.array([t.s for t in ts], dtype=np.float64),
            np.array([t.a for t in ts], dtype=np.float64),
            np.array([t.r for t in ts], dtype=np.float64),
            np.array([t.s_next for t in ts], dtype=np.float64),
            np.array([float(t.done) for t in ts]),
        )

    def __len__(self) -> int:
        return self.r.shape[0]


class ReplayBuffer:
    """Preallocated storage; once full, the oldest transition is overwritten."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a, r, s_next, done) -> None:
        if not np.isfinite(r):
            raise ValueError(f"reward must be finite, got {r}")
        i = self._next
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s_next[i] = s_next
        self.done[i] = float(done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self._size, size=batch_size)

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        """Uniform draw with replacement."""
        return self.gather(self.sample_indices(rng, batch_size))

    def observations(self) -> np.ndarray:
        return self.s[: self._size]
