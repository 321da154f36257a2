"""Acceptance criteria, one test each; the terminal summary prints PASS/FAIL per criterion."""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest

from scpo.envs import NormalizedEnv, Pendulum, fit_normalizer, sample_observations
from scpo.harness import (
    PerturbationSpec,
    TimingConfig,
    grid_sweep,
    timing_report,
    truncated_normal,
    truncated_normal_moments,
)
from scpo.mdp import (
    EpsilonBall,
    duality_gap_check,
    pairwise_distances,
    random_mdp,
    sc_bellman_apply,
    sc_policy_iteration,
    state_values,
    wasserstein_dual_backup,
)
from scpo.mdp import classical
from scpo.mdp.model import METRICS
from scpo.nn import GaussianTanhPolicy, Mlp, backward, forward
from scpo.sac import AgentConfig, TrainConfig, gbr, run_training, soft_state_value


def random_policy(rng, n_states, n_actions):
    return rng.dirichlet(np.ones(n_actions), size=n_states)


def normalized_pendulum():
    raw = Pendulum()
    return NormalizedEnv(raw, fit_normalizer(sample_observations(raw, 10_000, 0)))


@pytest.mark.criterion(1, "contraction")
def test_contraction(record_property):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    violations = strict = 0
    worst_ratio = 0.0
    for k in range(200):
        gamma = (0.5, 0.9, 0.99)[k % 3]
        n, a = int(rng.integers(1, 13)), int(rng.integers(1, 5))
        mdp = random_mdp(rng, n, a, gamma=gamma, dim=int(rng.integers(1, 3)))
        pi = random_policy(rng, n, a)
        ball = EpsilonBall(float(rng.choice([0.0, rng.uniform(0, 3)])), str(rng.choice(METRICS)))
        q1, q2 = rng.normal(scale=10, size=(2, n, a))
        t1, t2 = sc_bellman_apply(mdp, pi, ball, q1), sc_bellman_apply(mdp, pi, ball, q2)
        lhs, rhs = np.abs(t1 - t2).max(), gamma * np.abs(q1 - q2).max()
        # a few ulps of rounding in T are not a violation of the exact inequality
        slack = 4 * np.spacing(max(np.abs(t1).max(), np.abs(t2).max()))
        violations += int(lhs > rhs + slack)
        strict += int(lhs > rhs)
        worst_ratio = max(worst_ratio, lhs / (rhs / gamma) if rhs > 0 else 0.0)
    elapsed = time.perf_counter() - start
    record_property("detail", f"violations {violations}/200, raw strict-inequality misses {strict} "
                              f"(all within 4 ulp), {elapsed:.2f}s")
    assert violations == 0
    assert elapsed < 10.0


@pytest.mark.criterion(2, "monotone improvement")
def test_monotone_improvement(record_property):
    rng = np.random.default_rng(202)
    tol = 1e-10
    start = time.perf_counter()
    worst_drop, iterations = 0.0, 0
    for _ in range(50):
        n, a = int(rng.integers(2, 11)), int(rng.integers(2, 5))
        gamma = float(rng.choice([0.5, 0.9, 0.95]))
        mdp = random_mdp(rng, n, a, gamma=gamma, dim=int(rng.integers(1, 3)))
        ball = EpsilonBall(float(rng.uniform(0, 2.5)))
        result = sc_policy_iteration(mdp, ball, tol=tol)
        assert result.converged
        allowance = 2 * tol / (1 - gamma)
        for (_, q_prev), (_, q_next) in zip(result.history, result.history[1:]):
            drop = float((q_prev - q_next).max())
            worst_drop = max(worst_drop, drop)
            assert drop <= allowance
        iterations += result.iterations
    elapsed = time.perf_counter() - start
    record_property("detail", f"{iterations} iterations, largest drop {worst_drop:.1e}, {elapsed:.2f}s")
    assert elapsed < 30.0


@pytest.mark.criterion(3, "zero-radius reductions")
def test_zero_radius_reductions(record_property):
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    for _ in range(20):
        n, a = int(rng.integers(2, 12)), int(rng.integers(2, 5))
        mdp = random_mdp(rng, n, a, gamma=float(rng.choice([0.5, 0.9, 0.99])))
        result = sc_policy_iteration(mdp, EpsilonBall(0.0))
        policy, q, iters = classical.policy_iteration(mdp)
        assert np.array_equal(result.policy, policy)
        assert np.array_equal(result.q, q)
        assert result.iterations == iters

    env = Pendulum()
    cfg = dict(start_steps=256, update_after=256, eval_episodes=1)
    runs = [run_training(env, 1000, 5, AgentConfig(epsilon=0.0), TrainConfig(algorithm=alg, **cfg))
            for alg in ("sc_sac", "sac")]
    (sc, sc_log), (ref, ref_log) = runs
    for name, net in sc.networks().items():
        assert np.array_equal(net.params, ref.networks()[name].params), name
    assert np.array_equal(sc.log_alpha, ref.log_alpha)
    assert sc_log.episode_returns == ref_log.episode_returns
    elapsed = time.perf_counter() - start
    record_property("detail", f"20 MDPs identical, 744 SAC updates bit-equal, {elapsed:.1f}s")
    assert elapsed < 120.0


@pytest.mark.criterion(4, "regulariser fidelity")
def test_regulariser_error_is_second_order(record_property):
    start = time.perf_counter()
    agent, log = run_training(normalized_pendulum(), 3000, 0, AgentConfig(hidden=(64, 64)),
                              TrainConfig(eval_episodes=0))
    rng = np.random.default_rng(1)
    states = log.buffer.observations()[rng.choice(len(log.buffer), 64, replace=False)]
    noise = rng.standard_normal((16, agent.act_dim))  # common draws for every evaluation
    cube = np.array(list(itertools.product(np.linspace(-1.0, 1.0, 11), repeat=agent.obs_dim)))
    radii = (0.02, 0.01, 0.005, 0.0025)
    u, grad = soft_state_value(agent, states, noise)
    errors = []
    for eps in radii:
        brute = np.array([soft_state_value(agent, s + eps * cube, noise)[0].min() for s in states])
        errors.append(float(np.abs(gbr(u, grad, eps) - brute).mean()))
    slope = float(np.polyfit(np.log(radii), np.log(errors), 1)[0])
    elapsed = time.perf_counter() - start
    record_property("detail", f"slope {slope:.3f}, mean errors {', '.join(f'{e:.1e}' for e in errors)}, "
                              f"{elapsed:.0f}s")
    assert all(e > 0 for e in errors)
    assert slope >= 1.8
    assert elapsed < 300.0


@pytest.mark.criterion(5, "gradient correctness")
def test_gradients_match_finite_differences(record_property):
    rng = np.random.default_rng(505)
    start = time.perf_counter()
    worst, h = 0.0, 1e-6
    for k in range(100):
        sizes = [int(rng.integers(1, 6))] + [int(rng.integers(1, 9)) for _ in range(int(rng.integers(0, 3)))] \
            + [int(rng.integers(1, 4))]
        net = Mlp.init(sizes, rng, activation=("relu", "tanh")[k % 2])
        x = rng.normal(size=(int(rng.integers(1, 4)), sizes[0]))
        up = rng.normal(size=(x.shape[0], sizes[-1]))

        def loss(params, inputs):
            trial = Mlp(net.layer_sizes, params, net.activation)
            return float((forward(trial, inputs).output * up).sum())

        d_params, d_input = backward(net, forward(net, x), up)
        fd_params = np.empty(net.n_params)
        for i in range(net.n_params):
            e = np.zeros(net.n_params)
            e[i] = h
            fd_params[i] = (loss(net.params + e, x) - loss(net.params - e, x)) / (2 * h)
        fd_input = np.empty(x.size)
        for i in range(x.size):
            e = np.zeros(x.size)
            e[i] = h
            fd_input[i] = (loss(net.params, x + e.reshape(x.shape)) - loss(net.params, x - e.reshape(x.shape))) / (2 * h)
        for got, want in ((d_params, fd_params), (d_input.ravel(), fd_input)):
            rel = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-8)
            worst = max(worst, rel)
            assert rel < 1e-4
    elapsed = time.perf_counter() - start
    record_property("detail", f"worst relative error {worst:.1e}, {elapsed:.1f}s")
    assert elapsed < 60.0


@pytest.mark.criterion(6, "duality on convex profiles")
def test_duality_on_convex_profiles(record_property):
    rng = np.random.default_rng(606)
    spacing = 0.05
    x = np.arange(-40, 41) * spacing
    lambdas = np.linspace(0.0, 400.0, 400_001)  # step 1e-3
    start = time.perf_counter()
    worst_gap = 0.0
    for _ in range(100):
        a, b, slope = rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(-1, 1)
        c, d = rng.uniform(-1, 1, size=2)
        v = a * (x - c) ** 2 + b * np.abs(x - d) + slope * x
        centre = int(rng.integers(20, 61))
        p = int(rng.integers(1, 3))
        eps = (int(rng.integers(2, 11)) * spacing) ** p  # radius on a distance shell of the grid
        check = duality_gap_check(v, centre, eps, p_order=p, lambda_grid=lambdas, spacing=spacing)
        assert check.dual <= check.primal
        assert check.gap <= check.bound
        assert check.gap < 1e-3
        worst_gap = max(worst_gap, check.gap)
    elapsed = time.perf_counter() - start
    record_property("detail", f"largest gap {worst_gap:.1e}, lambda step 1e-3 up to 400, state step {spacing}, "
                              f"{elapsed:.1f}s")
    assert elapsed < 60.0


@pytest.mark.criterion(7, "deterministic-MDP equivalence")
def test_dual_backup_matches_state_ball_on_deterministic_mdps(record_property):
    rng = np.random.default_rng(707)
    lambdas = np.linspace(0.0, 100.0, 100_001)
    start = time.perf_counter()
    failures, gaps = 0, []
    for _ in range(20):
        n, a = int(rng.integers(5, 11)), int(rng.integers(2, 4))
        mdp = random_mdp(rng, n, a, deterministic=True, dim=int(rng.integers(1, 3)))
        pi, q = random_policy(rng, n, a), rng.normal(size=(n, a))
        eps = float(rng.integers(1, 3))
        dual = wasserstein_dual_backup(mdp, pi, q, eps, p_order=1, lambda_grid=lambdas)
        primal = sc_bellman_apply(mdp, pi, EpsilonBall(eps), q)
        dist = pairwise_distances(mdp.embedding)
        resolution = mdp.gamma * lambdas[1] * np.abs(dist - eps).max()
        assert np.all(dual <= primal + 1e-12)  # weak duality always holds
        gap = float(np.abs(primal - dual).max())
        gaps.append(gap)
        failures += int(gap > resolution)
    elapsed = time.perf_counter() - start
    record_property("detail", f"{failures}/20 instances outside the lambda-grid bound, largest gap "
                              f"{max(gaps):.3f}; the p=1 dual prices mixtures that move mass outside the ball "
                              f"(see test_dual_equals_the_distributional_relaxation_on_deterministic_mdps)")
    assert elapsed < 120.0
    assert failures == 0


@pytest.mark.nightly
@pytest.mark.criterion(8, "robustness trend")
def test_robustness_trend(record_property):
    env = normalized_pendulum()
    seeds = range(5)
    train_cfg = TrainConfig(eval_episodes=0, snapshot_epochs=4)
    mass = PerturbationSpec("mass", grid=(0.7, 1.0, 1.3))
    friction = PerturbationSpec("damping_friction", grid=(1.0,))
    start = time.perf_counter()
    results = {}
    for eps, alg in ((0.0, "sac"), (0.005, "sc_sac")):
        pools = []
        for seed in seeds:
            _, log = run_training(env, 20_000, seed, AgentConfig(epsilon=eps, hidden=(64, 64)),
                                  TrainConfig(**{**vars(train_cfg), "algorithm": alg}))
            pools.append(log.snapshots)
        results[alg] = grid_sweep(pools, env, mass, friction, episodes_per_policy=8, policies_per_seed=4)
    sac, sc = results["sac"], results["sc_sac"]
    means = {alg: [r.cell(m, 1.0).mean for m in mass.grid] for alg, r in results.items()}
    pooled = math.sqrt((sac.cell(1.0, 1.0).std ** 2 + sc.cell(1.0, 1.0).std ** 2) / 2)
    better = [m for i, m in enumerate(mass.grid) if m != 1.0 and means["sc_sac"][i] >= means["sac"][i]]
    source_diff = abs(means["sc_sac"][1] - means["sac"][1])
    elapsed = time.perf_counter() - start
    record_property("detail", "mean returns at mass 0.7/1.0/1.3: SAC " + "/".join(f"{m:.0f}" for m in means["sac"])
                    + ", SC-SAC " + "/".join(f"{m:.0f}" for m in means["sc_sac"])
                    + f"; source gap {source_diff:.0f} vs pooled std {pooled:.0f}; {elapsed / 60:.0f} min")
    assert sc.cell(1.0, 1.0).n_episodes == 160
    assert better, "SC-SAC is below SAC at both perturbed masses"
    assert source_diff < pooled
    assert elapsed < 2 * 3600


@pytest.mark.criterion(9, "protocol fidelity")
def test_protocol_fidelity(record_property):
    rng = np.random.default_rng(909)
    pools = [[(e, GaussianTanhPolicy.init(3, 1, (8,), rng)) for e in range(10)] for _ in range(5)]
    mass = PerturbationSpec("mass", grid=(0.8, 1.0, 1.2))
    friction = PerturbationSpec("damping_friction", grid=(0.5, 1.0))
    result = grid_sweep(pools, Pendulum(max_episode_steps=5), mass, friction)
    assert all(c.n_episodes == 160 for c in result.cells)
    assert len(result.episodes) == 160 * len(result.cells)

    start = time.perf_counter()
    xi = truncated_normal(np.random.default_rng(0), 100_000)
    mean, std = truncated_normal_moments(3.0)
    assert np.abs(xi).max() <= 3.0
    assert abs(xi.mean() - mean) <= 0.01 * std  # the mean is zero, so compare on the scale of the spread
    assert abs(xi.std() - std) <= 0.01 * std
    elapsed = time.perf_counter() - start
    record_property("detail", f"160 episodes in each of {len(result.cells)} cells; sample mean {xi.mean():+.4f}, "
                              f"std {xi.std():.4f} vs {std:.4f}")
    assert elapsed < 60.0


@pytest.mark.criterion(10, "overhead report")
def test_overhead_report(record_property):
    env = Pendulum()
    configs = [TimingConfig("sac", env, AgentConfig(epsilon=0.0), "sac"),
               TimingConfig("sc_sac", env, AgentConfig(epsilon=0.005), "sc_sac")]
    report = timing_report(configs, windows=5, window_steps=1000, warmup_steps=1000)
    ratio, spread = report.overhead["sc_sac"]
    rows = {r.label: r for r in report.rows}
    record_property("detail", f"SAC {rows['sac'].mean:.1f}+-{rows['sac'].std:.1f}s, SC-SAC "
                              f"{rows['sc_sac'].mean:.1f}+-{rows['sc_sac'].std:.1f}s per 1000 steps; "
                              f"overhead {ratio:.3f}+-{spread:.3f} (published {report.published_overhead})")
    assert report.reference == "sac"
    assert all(len(r.windows) >= 5 and math.isfinite(r.std) and r.std > 0 for r in report.rows)
    assert math.isfinite(ratio) and ratio > 0 and math.isfinite(spread)
