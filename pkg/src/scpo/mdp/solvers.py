"""State-conservative policy evaluation, improvement and iteration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from scpo import kernels
from scpo.mdp.model import EpsilonBall, FiniteMdp, ball_structure, check_policy, check_q, deterministic_policy
from scpo.mdp.operators import state_values

DEFAULT_TOL = 1e-10
MAX_EVAL_SWEEPS = 10**6
MAX_PI_ITERS = 10**3
IMPROVEMENT_RULES = ("pointwise", "ball")


class ConvergenceError(RuntimeError):
    """Fixed-point iteration hit its sweep cap before reaching the tolerance."""

    def __init__(self, residual: float, sweeps: int):
        super().__init__(f"no convergence after {sweeps} sweeps (last residual {residual:.3e})")
        self.residual = residual
        self.sweeps = sweeps


@dataclass
class EvaluationResult:
    q: np.ndarray
    sweeps: int
    residual: float


def evaluate(
    mdp: FiniteMdp,
    policy: np.ndarray,
    ball: EpsilonBall,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = MAX_EVAL_SWEEPS,
    q0: np.ndarray | None = None,
) -> EvaluationResult:
    """SC-PE with sweep count and final residual."""
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    policy = check_policy(mdp, policy)
    indptr, indices = ball_structure(mdp, ball)
    q = np.zeros((mdp.n_states, mdp.n_actions)) if q0 is None else check_q(mdp, q0).copy()
    residual = np.inf
    for sweep in range(1, max_sweeps + 1):
        worst = kernels.ball_min(np.ascontiguousarray(state_values(policy, q)), indptr, indices)
        q_next = mdp.reward + mdp.gamma * (mdp.transition @ worst)
        residual = float(np.abs(q_next - q).max())
        q = q_next
        if residual < tol:
            return EvaluationResult(q, sweep, residual)
    raise ConvergenceError(residual, max_sweeps)


def sc_policy_evaluation(
    mdp: FiniteMdp,
    policy: np.ndarray,
    ball: EpsilonBall,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = MAX_EVAL_SWEEPS,
    q0: np.ndarray | None = None,
) -> np.ndarray:
    """Iterate the state-conservative Bellman operator from ``q0`` (zeros) to a fixed point.

    Stops once successive tables differ by less than ``tol`` in sup-norm, so the
    result solves the state-conservative Bellman equation to within
    ``tol / (1 - gamma)``.

    Raises
    ------
    ConvergenceError
        If ``max_sweeps`` iterations do not reach ``tol``.
    """
    return evaluate(mdp, policy, ball, tol, max_sweeps, q0).q


def sc_greedy_improvement(mdp: FiniteMdp, q: np.ndarray, ball: EpsilonBall) -> np.ndarray:
    """Deterministic policy maximising the worst case over the ball around each state.

    ``pi(s) = argmax_a min_{s' in B(s)} q(s', a)``; ties go to the lowest action.
    """
    q = check_q(mdp, q)
    indptr, indices = ball_structure(mdp, ball)
    worst = np.minimum.reduceat(q[indices], indptr[:-1], axis=0)
    return deterministic_policy(worst.argmax(axis=1), mdp.n_actions)


def greedy_improvement(mdp: FiniteMdp, q: np.ndarray) -> np.ndarray:
    """Deterministic policy ``pi(s) = argmax_a q(s, a)`` (lowest action on ties)."""
    q = check_q(mdp, q)
    return deterministic_policy(q.argmax(axis=1), mdp.n_actions)


@dataclass
class PolicyIterationResult:
    policy: np.ndarray
    q: np.ndarray
    iterations: int
    residual: float
    converged: bool
    history: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)

    def __iter__(self):
        # allows ``policy, q = sc_policy_iteration(...)``
        return iter((self.policy, self.q))


def sc_policy_iteration(
    mdp: FiniteMdp,
    ball: EpsilonBall,
    tol: float = DEFAULT_TOL,
    max_iters: int = MAX_PI_ITERS,
    improvement: str = "pointwise",
    initial_policy: np.ndarray | None = None,
    max_sweeps: int = MAX_EVAL_SWEEPS,
) -> PolicyIterationResult:
    """Alternate SC-PE and greedy improvement until the policy stops changing.

    ``improvement="pointwise"`` picks ``argmax_a Q(s, a)`` of the state-conservative
    Q table, which keeps the Q tables non-decreasing from one iteration to the
    next. ``improvement="ball"`` uses :func:`sc_greedy_improvement` (worst case
    over the ball around ``s``); that rule can lower Q values and cycle on
    stochastic instances. Both coincide with classical policy iteration at
    ``epsilon = 0``. Every ``(policy, Q)`` pair visited is kept in ``history``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if improvement not in IMPROVEMENT_RULES:
        raise ValueError(f"improvement must be one of {IMPROVEMENT_RULES}")
    if initial_policy is None:
        policy = deterministic_policy(np.zeros(mdp.n_states, dtype=np.intp), mdp.n_actions)
    else:
        policy = check_policy(mdp, initial_policy).copy()
    history = []
    for it in range(1, max_iters + 1):
        ev = evaluate(mdp, policy, ball, tol, max_sweeps)
        history.append((policy, ev.q))
        if improvement == "pointwise":
            new_policy = greedy_improvement(mdp, ev.q)
        else:
            new_policy = sc_greedy_improvement(mdp, ev.q, ball)
        if np.array_equal(new_policy, policy):
            return PolicyIterationResult(policy, ev.q, it, ev.residual, True, history)
        policy = new_policy
    return PolicyIterationResult(policy, ev.q, max_iters, ev.residual, False, history)


def sc_value_iteration(mdp: FiniteMdp, ball: EpsilonBall, tol: float = DEFAULT_TOL,
                       max_sweeps: int = MAX_EVAL_SWEEPS) -> np.ndarray:
    """Fixed point of ``Q -> r + gamma E min_{B(s~)} max_a Q``, the optimal SC table."""
    indptr, indices = ball_structure(mdp, ball)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_sweeps):
        worst = kernels.ball_min(np.ascontiguousarray(q.max(axis=1)), indptr, indices)
        q_next = mdp.reward + mdp.gamma * (mdp.transition @ worst)
        residual = float(np.abs(q_next - q).max())
        q = q_next
        if residual < tol:
            return q
    raise ConvergenceError(residual, max_sweeps)
