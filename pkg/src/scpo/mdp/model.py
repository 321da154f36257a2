"""Finite MDPs with embedded states and epsilon-balls over them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METRICS = ("linf", "l2")


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular MDP whose states carry coordinates in R^m.

    ``transition[s, a, s']`` is the source-environment kernel, ``reward[s, a]``
    the bounded reward and ``embedding[s]`` the coordinates used to build
    epsilon-balls over discrete states.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    embedding: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.transition, dtype=np.float64)
        r = np.array(self.reward, dtype=np.float64)
        emb = np.array(self.embedding, dtype=np.float64)
        if emb.ndim == 1:
            emb = emb[:, None]
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        n_s, n_a, _ = p.shape
        if n_s < 1 or n_a < 1:
            raise ValueError("need at least one state and one action")
        if r.shape != (n_s, n_a):
            raise ValueError(f"reward must have shape {(n_s, n_a)}, got {r.shape}")
        if emb.ndim != 2 or emb.shape[0] != n_s:
            raise ValueError(f"embedding must have shape (S, m) with S={n_s}, got {emb.shape}")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embedding must be finite")
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValueError("transition probabilities must lie in [0, 1]")
        sums = p.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > 1e-12)
        if bad.size:
            s, a = bad[0]
            raise ValueError(f"transition row (s={s}, a={a}) sums to {sums[s, a]!r}, not 1")
        for name, arr in (("transition", p), ("reward", r), ("embedding", emb)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def is_deterministic(self) -> bool:
        return bool(np.all((self.transition == 0.0) | (self.transition == 1.0)))


@dataclass(frozen=True)
class EpsilonBall:
    """Radius and metric of the disturbance region around a state."""

    epsilon: float
    metric: str = "linf"

    def __post_init__(self) -> None:
        if not self.epsilon >= 0.0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")


def pairwise_distances(embedding: np.ndarray, metric: str = "linf") -> np.ndarray:
    diff = embedding[:, None, :] - embedding[None, :, :]
    if metric == "linf":
        return np.abs(diff).max(axis=2)
    if metric == "l2":
        return np.sqrt((diff * diff).sum(axis=2))
    raise ValueError(f"unknown metric {metric!r}")


def ball_members(mdp: FiniteMdp, ball: EpsilonBall, s: int) -> list[int]:
    """States whose embedding lies within ``ball.epsilon`` of state ``s``."""
    if not 0 <= s < mdp.n_states:
        raise IndexError(f"state {s} out of range for {mdp.n_states} states")
    d = pairwise_distances(mdp.embedding, ball.metric)[s]
    return [int(i) for i in np.flatnonzero(d <= ball.epsilon)]


def ball_structure(mdp: FiniteMdp, ball: EpsilonBall) -> tuple[np.ndarray, np.ndarray]:
    """All balls at once in CSR form: members of ``s`` are ``indices[indptr[s]:indptr[s+1]]``."""
    inside = pairwise_distances(mdp.embedding, ball.metric) <= ball.epsilon
    counts = inside.sum(axis=1)
    indptr = np.zeros(mdp.n_states + 1, dtype=np.intp)
    np.cumsum(counts, out=indptr[1:])
    indices = np.nonzero(inside)[1].astype(np.intp)
    return indptr, indices


def deterministic_policy(actions, n_actions: int) -> np.ndarray:
    """One-hot ``(S, A)`` policy table from a vector of action indices."""
    actions = np.asarray(actions, dtype=np.intp)
    probs = np.zeros((actions.shape[0], n_actions))
    probs[np.arange(actions.shape[0]), actions] = 1.0
    return probs


def check_policy(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy must have shape {(mdp.n_states, mdp.n_actions)}, got {policy.shape}")
    if np.any(policy < 0.0) or np.any(np.abs(policy.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("policy rows must be probability vectors")
    return policy


def check_q(mdp: FiniteMdp, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"Q table must have shape {(mdp.n_states, mdp.n_actions)}, got {q.shape}")
    return q


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float = 0.9,
               dim: int = 1, deterministic: bool = False, sparsity: float = 0.5) -> FiniteMdp:
    """Random instance for tests and benchmarks, embedded on an integer lattice.

    Stochastic rows keep each next state with probability ``1 - sparsity``
    (at least one survives) and are renormalised so they sum to one exactly
    enough for the model's tolerance.
    """
    if deterministic:
        p = np.zeros((n_states, n_actions, n_states))
        nxt = rng.integers(0, n_states, size=(n_states, n_actions))
        p[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], nxt] = 1.0
    else:
        w = rng.random((n_states, n_actions, n_states))
        w *= rng.random(w.shape) >= sparsity
        empty = w.sum(axis=2) == 0.0
        w[empty, rng.integers(0, n_states, size=int(empty.sum()))] = 1.0
        p = w / w.sum(axis=2, keepdims=True)
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    if dim == 1:
        emb = np.arange(n_states, dtype=np.float64)[:, None]
    else:
        emb = rng.integers(0, max(2, int(round(n_states ** (1.0 / dim))) + 1), size=(n_states, dim)).astype(np.float64)
    return FiniteMdp(p, reward, gamma, emb)
