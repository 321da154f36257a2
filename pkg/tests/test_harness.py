from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from scpo.envs import Pendulum
from scpo.harness import (
    PerturbationSpec,
    TimingConfig,
    domain_randomized_train,
    gaussian_sweep,
    grid_sweep,
    linearity_probe,
    load_pool,
    run_episode,
    scaled_env,
    timing_report,
    truncated_normal,
    truncated_normal_moments,
    write_probe_csv,
    write_samples_csv,
    write_summary_csv,
    write_sweep_csv,
    write_timing_csv,
)
from scpo.nn import GaussianTanhPolicy, Mlp
from scpo.sac import AgentConfig, AgentState, TrainConfig, evaluate_policy, make_streams, save_policies, train


def short_pendulum(steps=12):
    return Pendulum(max_episode_steps=steps)


def pool(seed, n=5):
    rng = np.random.default_rng(seed)
    return [(e, GaussianTanhPolicy.init(3, 1, (8,), rng)) for e in range(n)]


MASS = PerturbationSpec("mass", grid=(0.7, 1.0, 1.3))
FRICTION = PerturbationSpec("damping_friction", grid=(1.0, 2.0))


def test_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec("mass", grid=())
    with pytest.raises(ValueError):
        PerturbationSpec("mass", grid=(0.0, 1.0))
    with pytest.raises(ValueError):
        PerturbationSpec("mass", mode="truncated_gaussian", sigma_p=0.0)
    with pytest.raises(ValueError):
        PerturbationSpec("mass", mode="uniform")
    spec = PerturbationSpec("mass", mode="truncated_gaussian", sigma_p=0.1)
    assert spec.scale_bounds() == pytest.approx((0.7, 1.3))
    with pytest.raises(ValueError):
        scaled_env(Pendulum(), {"inertia": 2.0})
    assert scaled_env(Pendulum(), {"mass": 1.5}).params.mass == 1.5


def test_five_seeds_give_160_episodes_per_cell():
    result = grid_sweep([pool(s) for s in range(5)], short_pendulum(), MASS, FRICTION)
    assert len(result.cells) == 6
    assert all(c.n_episodes == 160 for c in result.cells)
    assert len(result.episodes) == 6 * 160
    assert result.metadata["actions"] == "mean"


def test_cell_statistics_match_stored_returns():
    result = grid_sweep([pool(0), pool(1)], short_pendulum(), MASS, FRICTION, episodes_per_policy=3,
                        policies_per_seed=2)
    for c in result.cells:
        r = result.cell_returns(c.scale_x, c.scale_y)
        assert (c.mean, c.std, c.min, c.max) == (r.mean(), r.std(), r.min(), r.max())


def test_identity_cell_matches_plain_evaluation():
    env = short_pendulum()
    pools = [pool(0), pool(1)]
    result = grid_sweep(pools, env, MASS, FRICTION, episodes_per_policy=3, policies_per_seed=2)
    expected = []
    for s, chosen in enumerate(result.metadata["policy_epochs"]):
        for epoch in chosen:
            expected += evaluate_policy(dict(pools[s])[epoch], env, result.metadata["reset_seeds"])
    assert result.cell_returns(1.0, 1.0).tolist() == expected


def test_repeated_initial_state_has_zero_spread():
    result = grid_sweep([pool(0, n=1)], short_pendulum(), MASS, FRICTION, policies_per_seed=1,
                        reset_seeds=[3] * 8)
    assert all(c.std == 0.0 and c.n_episodes == 8 for c in result.cells)


def test_sweeps_are_reproducible_and_parallel_safe():
    args = ([pool(0), pool(1)], short_pendulum(), MASS, FRICTION, 2, 2)
    a, b, c = grid_sweep(*args), grid_sweep(*args), grid_sweep(*args, jobs=2)
    assert a.episodes == b.episodes == c.episodes and a.cells == c.cells


def test_checkpoint_files(tmp_path):
    save_policies(tmp_path / "policies.npz", pool(0, n=3))
    loaded = load_pool(tmp_path)
    assert [e for e, _ in loaded] == [0, 1, 2]
    result = grid_sweep([tmp_path], short_pendulum(), MASS, FRICTION, 2, 2)
    assert result.metadata["checkpoints"] == [str(tmp_path)]
    with pytest.raises(FileNotFoundError):
        grid_sweep([tmp_path / "missing"], short_pendulum(), MASS, FRICTION)
    with pytest.raises(ValueError):
        grid_sweep([pool(0, n=3)], short_pendulum(), MASS, FRICTION, policies_per_seed=4)


def test_stochastic_evaluation_flag_changes_returns():
    args = ([pool(0)], short_pendulum(), MASS, FRICTION, 2, 2)
    mean_actions, sampled = grid_sweep(*args), grid_sweep(*args, stochastic=True)
    assert sampled.metadata["actions"] == "stochastic"
    assert mean_actions.episodes != sampled.episodes
    assert sampled.episodes == grid_sweep(*args, stochastic=True).episodes


def test_sweep_csv_files(tmp_path):
    result = grid_sweep([pool(0)], short_pendulum(), MASS, FRICTION, 2, 2)
    write_sweep_csv(result, tmp_path / "episodes.csv")
    write_summary_csv(result, tmp_path / "summary.csv")
    rows = list(csv.reader(open(tmp_path / "episodes.csv")))
    assert rows[0] == ["param_x", "param_y", "seed", "policy_id", "episode", "return"]
    assert len(rows) == 1 + 6 * 4
    assert float(rows[1][5]) == result.episodes[0][5]
    summary = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert float(summary[0]["mean"]) == result.cells[0].mean


# -- truncated Gaussian -------------------------------------------------------------------------

def test_truncated_normal_moments_match_the_closed_form():
    xi = truncated_normal(np.random.default_rng(0), 100_000)
    mean, std = truncated_normal_moments()
    assert np.abs(xi).max() <= 3.0
    assert abs(xi.mean() - mean) < 0.01 * std
    assert xi.std() == pytest.approx(std, rel=0.01)
    # closed form against numerical integration of the normal density
    grid = np.linspace(-3, 3, 200_001)
    dens = np.exp(-0.5 * grid**2)
    dens[[0, -1]] *= 0.5  # trapezoid weights
    var = float((grid**2 * dens).sum() / dens.sum())
    assert std == pytest.approx(math.sqrt(var), rel=1e-8)


def test_sampled_scales_respect_the_truncation():
    spec = PerturbationSpec("mass", mode="truncated_gaussian", sigma_p=0.2)
    result = gaussian_sweep([pool(0)], short_pendulum(5), [spec], n_samples=300)
    assert result.scales.min() >= 1 - 3 * 0.2 and result.scales.max() <= 1 + 3 * 0.2
    assert result.returns.shape == (300,)
    with pytest.raises(ValueError):
        gaussian_sweep([pool(0)], short_pendulum(), [MASS], 10)


def test_tiny_sigma_reproduces_unperturbed_returns(tmp_path):
    env = short_pendulum()
    spec = PerturbationSpec("mass", mode="truncated_gaussian", sigma_p=1e-12)
    policies = pool(0, n=2)
    result = gaussian_sweep([policies], env, [spec], n_samples=20, eval_seed=50)
    for k, (_, j) in enumerate(result.policy_ids):
        plain = run_episode(policies[j][1], env, 50 + k)
        assert result.returns[k] == pytest.approx(plain, rel=1e-9, abs=1e-9)
    write_samples_csv(result, tmp_path / "samples.csv")
    rows = list(csv.reader(open(tmp_path / "samples.csv")))
    assert rows[0] == ["sample", "scale_mass", "return"] and len(rows) == 21


# -- linearity probe -----------------------------------------------------------------------------

def test_linear_critic_gives_an_exact_plane(tmp_path):
    critic = Mlp([4, 1], params=np.array([0.4, -1.3, 2.0, 0.0, 0.7]))  # ignores the action
    policy = pool(0, n=1)[0][1]
    result = linearity_probe(critic, policy, [0.1, 0.9, -0.3], [1, 0, 0], [0, 1, 1], 0.005, grid_n=11,
                             n_noise=50)
    assert result.delta[5, 5] == 0.0
    _, max_resid, r2 = result.plane_fit()
    assert max_resid < 1e-10 and r2 == pytest.approx(1.0)
    write_probe_csv(result, tmp_path / "probe.csv")
    rows = list(csv.reader(open(tmp_path / "probe.csv")))
    assert len(rows) == 12 and len(rows[0]) == 12


def test_probe_of_nonlinear_critic():
    rng = np.random.default_rng(2)
    critic = (Mlp.init([4, 16, 1], rng), Mlp.init([4, 16, 1], rng))
    policy = GaussianTanhPolicy.init(3, 1, (8,), rng)
    s = np.array([0.2, -0.4, 0.5])
    one = linearity_probe(critic, policy, s, [1, 0, 0], [0, 0, 1], 0.5, grid_n=5, n_noise=1)
    assert one.delta[2, 2] == 0.0 and np.any(one.delta != 0.0)
    with pytest.raises(ValueError):
        linearity_probe(critic, policy, s, [1, 0, 0], [1, 1, 0], 0.1)
    with pytest.raises(ValueError):
        linearity_probe(critic, policy, s, [1, 0, 0], [0, 1, 0], 0.1, grid_n=4)


# -- domain randomisation --------------------------------------------------------------------------

def _agent(seed, streams):
    return AgentState.create(3, 1, AgentConfig(epsilon=0.0, hidden=(16, 16)), streams.init, streams.policy)


def test_degenerate_range_is_plain_training():
    cfg = TrainConfig(start_steps=50, update_after=50, epoch_len=100, batch_size=32, eval_episodes=1)
    env = Pendulum(max_episode_steps=40)
    s1, s2 = make_streams(3), make_streams(3)
    a1, a2 = _agent(3, s1), _agent(3, s2)
    log_dr = domain_randomized_train(a1, env, PerturbationSpec("mass", grid=(1.0,)), 300, cfg, s1)
    log_plain = train(a2, env, 300, cfg, s2)
    assert np.array_equal(a1.policy.trunk.params, a2.policy.trunk.params)
    assert log_dr.episode_returns == log_plain.episode_returns
    assert set(log_dr.domain_scales) == {1.0}


def test_randomised_scales_stay_in_range():
    cfg = TrainConfig(start_steps=10**6, update_after=10**6, epoch_len=10**6, eval_episodes=0)
    streams = make_streams(0)
    log = domain_randomized_train(_agent(0, streams), Pendulum(max_episode_steps=1),
                                  PerturbationSpec("mass", grid=(0.5, 2.0)), 10_000, cfg, streams)
    scales = np.array(log.domain_scales)
    assert scales.size == 10_001 and scales.min() >= 0.5 and scales.max() <= 2.0
    assert scales.min() < 0.51 and scales.max() > 1.99
    streams = make_streams(0)
    with pytest.raises(ValueError):
        domain_randomized_train(AgentState.create(3, 1, AgentConfig(hidden=(4,))), Pendulum(), MASS, 10)


# -- timing ------------------------------------------------------------------------------------------

def test_timing_report_shape(tmp_path):
    env = Pendulum()
    small = AgentConfig(hidden=(8,))
    configs = [TimingConfig("sac", env, AgentConfig(epsilon=0.0, hidden=(8,)), "sac", batch_size=16),
               TimingConfig("sac_again", env, AgentConfig(epsilon=0.0, hidden=(8,)), "sac", batch_size=16),
               TimingConfig("sc_sac", env, small, batch_size=16)]
    report = timing_report(configs, windows=5, window_steps=40, warmup_steps=40)
    assert report.reference == "sac"
    assert all(len(r.windows) == 5 and r.std > 0 for r in report.rows)
    assert report.overhead["sac"][0] == 1.0
    assert 0.5 < report.overhead["sac_again"][0] < 2.0
    assert report.published_overhead == pytest.approx(1.323)
    write_timing_csv(report, tmp_path / "timing.csv")
    assert len(list(csv.DictReader(open(tmp_path / "timing.csv")))) == 3
    with pytest.raises(ValueError):
        timing_report(configs, windows=4)
