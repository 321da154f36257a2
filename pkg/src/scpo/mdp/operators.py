"""State-conservative and Wasserstein-dual Bellman backups."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from scpo import kernels
from scpo.mdp.model import (
    EpsilonBall,
    FiniteMdp,
    ball_structure,
    check_policy,
    check_q,
    pairwise_distances,
)


def state_values(policy: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``V(s) = sum_a pi(a|s) Q(s, a)``."""
    return (policy * q).sum(axis=1)


def sc_bellman_apply(
    mdp: FiniteMdp,
    policy: np.ndarray,
    ball: EpsilonBall,
    q: np.ndarray,
    structure: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """One application of the state-conservative Bellman operator.

    ``out(s, a) = r(s, a) + gamma * E_{s~ ~ p(.|s,a)} min_{s' in B(s~)} V(s')``.
    ``structure`` lets callers reuse a precomputed :func:`ball_structure`.
    """
    policy = check_policy(mdp, policy)
    q = check_q(mdp, q)
    indptr, indices = structure if structure is not None else ball_structure(mdp, ball)
    worst = kernels.ball_min(np.ascontiguousarray(state_values(policy, q)), indptr, indices)
    return mdp.reward + mdp.gamma * (mdp.transition @ worst)


def _check_lambda_grid(lambda_grid) -> np.ndarray:
    lam = np.asarray(lambda_grid, dtype=np.float64).ravel()
    if lam.size == 0:
        raise ValueError("lambda_grid must not be empty")
    if np.any(np.isnan(lam)) or np.any(lam < 0.0):
        raise ValueError("lambda_grid entries must be non-negative")
    if np.any(np.diff(lam) < 0.0):
        raise ValueError("lambda_grid must be sorted ascending")
    return lam


def _inner_minima(values: np.ndarray, penalty: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """``min_s values[s] + lam * penalty[s, t]`` for every lambda (rows) and target t.

    An infinite lambda is evaluated as its limit: points with positive penalty
    are excluded, zero-penalty points keep their value, negative penalty
    sends the minimum to ``-inf``.
    """
    finite = np.isfinite(lam)
    out = np.empty((lam.shape[0], penalty.shape[1]))
    if finite.any():
        out[finite] = kernels.lagrangian_min(
            np.ascontiguousarray(values), np.ascontiguousarray(penalty), np.ascontiguousarray(lam[finite])
        )
    if not finite.all():
        limit = np.where(penalty > 0.0, np.inf, np.where(penalty < 0.0, -np.inf, values[:, None]))
        out[~finite] = limit.min(axis=0)
    return out


def wasserstein_dual_backup(
    mdp: FiniteMdp,
    policy: np.ndarray,
    q: np.ndarray,
    epsilon: float,
    p_order: int = 1,
    lambda_grid=(0.0,),
    metric: str = "linf",
) -> np.ndarray:
    """Robust backup under a Wasserstein-p ball, computed through its Lagrangian dual.

    ``out(s, a) = r + gamma * max_lambda E_{s~} [min_{s'} V(s') + lambda (d(s', s~)^p - epsilon)]``
    with the inner minimum enumerated over every state and ``lambda`` restricted
    to ``lambda_grid``.
    """
    if p_order < 1:
        raise ValueError("p_order must be >= 1")
    policy = check_policy(mdp, policy)
    q = check_q(mdp, q)
    lam = _check_lambda_grid(lambda_grid)
    penalty = pairwise_distances(mdp.embedding, metric) ** p_order - epsilon
    inner = _inner_minima(state_values(policy, q), penalty, lam)
    expected = mdp.transition @ inner.T  # (S, A, n_lambda)
    return mdp.reward + mdp.gamma * expected.max(axis=2)


class DualityCheck(NamedTuple):
    primal: float
    dual: float
    bound: float

    @property
    def gap(self) -> float:
        return self.primal - self.dual


class NonConvexProfileError(ValueError):
    pass


def duality_gap_check(
    v_values,
    center_index: int,
    epsilon: float,
    p_order: int = 1,
    lambda_grid=(0.0,),
    spacing: float = 1.0,
    require_convex: bool = True,
) -> DualityCheck:
    """Compare the constrained minimum of a 1-D profile with its Lagrangian dual.

    The profile lives on a uniform grid with step ``spacing``; the constraint
    set is ``{x : |x - x_center|^p <= epsilon}``. Returns the primal minimum,
    the best dual value over ``lambda_grid`` and an a-priori bound on
    ``primal - dual`` that holds for convex profiles (``inf`` when the grid
    cannot certify one).
    """
    v = np.asarray(v_values, dtype=np.float64).ravel()
    if v.size < 1 or not 0 <= center_index < v.size:
        raise ValueError("center_index out of range")
    if p_order < 1:
        raise ValueError("p_order must be >= 1")
    if spacing <= 0.0:
        raise ValueError("spacing must be positive")
    if require_convex and v.size >= 3:
        second = v[2:] - 2.0 * v[1:-1] + v[:-2]
        if np.any(second < -1e-12 * max(1.0, float(np.abs(v).max()))):
            raise NonConvexProfileError("profile is not convex (negative second difference)")
    lam = _check_lambda_grid(lambda_grid)

    dist_p = (np.abs(np.arange(v.size) - center_index) * spacing) ** p_order
    inside = dist_p <= epsilon
    primal = float(v[inside].min())
    penalty = (dist_p - epsilon)[:, None]
    dual = float(_inner_minima(v, penalty, lam)[:, 0].max())

    # lambda-grid term: g(lambda) is concave with slopes in penalty, and its
    # maximiser lies below lam_needed.
    outside = ~inside
    lam_needed = 0.0
    if outside.any():
        lam_needed = max(0.0, float(((primal - v[outside]) / penalty[outside, 0]).max()))
    finite = lam[np.isfinite(lam)]
    if finite.size and finite[-1] >= lam_needed:
        step = max(float(finite[0]), float(np.diff(finite).max()) if finite.size > 1 else 0.0)
        lam_term = step * float(np.abs(penalty).max())
    else:
        lam_term = np.inf
    # state-grid term: epsilon strictly between two distance shells lets the
    # convex envelope interpolate towards the next shell.
    shells = np.unique(dist_p)
    beyond = shells[shells > epsilon]
    if beyond.size and not np.any(shells == epsilon):
        nxt = v[dist_p == beyond[0]].min()
        state_term = max(0.0, primal - float(nxt))
    else:
        state_term = 0.0
    return DualityCheck(primal, dual, lam_term + state_term)
