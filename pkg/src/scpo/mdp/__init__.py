"""Exact state-conservative solvers for finite MDPs."""

from scpo.mdp.model import (
    EpsilonBall,
    FiniteMdp,
    ball_members,
    ball_structure,
    deterministic_policy,
    pairwise_distances,
    random_mdp,
)
from scpo.mdp.operators import (
    DualityCheck,
    NonConvexProfileError,
    duality_gap_check,
    sc_bellman_apply,
    state_values,
    wasserstein_dual_backup,
)
from scpo.mdp.solvers import (
    ConvergenceError,
    PolicyIterationResult,
    greedy_improvement,
    sc_greedy_improvement,
    sc_policy_evaluation,
    sc_policy_iteration,
    sc_value_iteration,
)

__all__ = [
    "ConvergenceError",
    "DualityCheck",
    "EpsilonBall",
    "FiniteMdp",
    "NonConvexProfileError",
    "PolicyIterationResult",
    "ball_members",
    "ball_structure",
    "deterministic_policy",
    "duality_gap_check",
    "greedy_improvement",
    "pairwise_distances",
    "random_mdp",
    "sc_bellman_apply",
    "sc_greedy_improvement",
    "sc_policy_evaluation",
    "sc_policy_iteration",
    "sc_value_iteration",
    "state_values",
    "wasserstein_dual_backup",
]
