"""Classical (non-robust) policy evaluation and iteration.

Kept free of any ball machinery: it is the reference that the
state-conservative solvers must reproduce at ``epsilon = 0``. The sweep is
the same synchronous update, so results agree bit for bit.
"""

from __future__ import annotations

import numpy as np

from scpo.mdp.model import FiniteMdp


def policy_evaluation(mdp: FiniteMdp, policy: np.ndarray, tol: float = 1e-10,
                      max_sweeps: int = 10**6) -> np.ndarray:
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_sweeps):
        v = (policy * q).sum(axis=1)
        q_next = mdp.reward + mdp.gamma * (mdp.transition @ v)
        done = np.abs(q_next - q).max() < tol
        q = q_next
        if done:
            return q
    raise RuntimeError("classical policy evaluation did not converge")


def policy_iteration(mdp: FiniteMdp, tol: float = 1e-10, max_iters: int = 1000):
    """Returns ``(policy, q, iterations)`` starting from action 0 everywhere."""
    n_s, n_a = mdp.n_states, mdp.n_actions
    actions = np.zeros(n_s, dtype=np.intp)
    for it in range(1, max_iters + 1):
        policy = np.zeros((n_s, n_a))
        policy[np.arange(n_s), actions] = 1.0
        q = policy_evaluation(mdp, policy, tol)
        new_actions = q.argmax(axis=1)
        if np.array_equal(new_actions, actions):
            return policy, q, it
        actions = new_actions
    return policy, q, max_iters


def exact_q(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    """Q^pi by a direct linear solve, for cross-checking the iterative solvers."""
    n_s, n_a = mdp.n_states, mdp.n_actions
    p_pi = np.einsum("sat,tb->satb", mdp.transition, policy).reshape(n_s * n_a, n_s * n_a)
    q = np.linalg.solve(np.eye(n_s * n_a) - mdp.gamma * p_pi, mdp.reward.ravel())
    return q.reshape(n_s, n_a)
