"""Robustness evaluation protocols: parameter grids, truncated-Gaussian draws,
local-linearity probes, domain-randomised training and timing."""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from scpo.envs import base_env
from scpo.nn import GaussianTanhPolicy, policy_forward, policy_mean_action, policy_sample
from scpo.sac.agent import AgentConfig, AgentState, critic_min
from scpo.sac.train import TrainConfig, TrainingLog, load_policies, make_streams, train

TRUNCATION = 3.0
PUBLISHED_OVERHEAD = 1.323  # reported SC-SAC / SAC wall-time ratio, for comparison only
MODES = ("grid", "truncated_gaussian")

# relative std per parameter for truncated-Gaussian evaluation; must stay below 1/3 so scales remain positive
SIGMA_P_DEFAULTS = {
    "pendulum": {"mass": 0.1, "length": 0.1, "damping_friction": 0.3},
    "cartpole": {"cart_mass": 0.3, "pole_mass": 0.3, "pole_length": 0.1, "track_friction": 0.3},
}


@dataclass(frozen=True)
class PerturbationSpec:
    """Relative perturbation of one physical parameter.

    ``grid`` mode lists multiplicative scales; ``truncated_gaussian`` mode
    draws ``1 + sigma_p * xi`` with ``xi`` a standard normal truncated at +-3.
    """

    parameter: str
    mode: str = "grid"
    grid: tuple = ()
    sigma_p: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        if self.mode == "grid":
            if not self.grid or min(self.grid) <= 0.0 or not all(map(math.isfinite, self.grid)):
                raise ValueError("grid mode needs a non-empty list of positive scales")
        else:
            if self.sigma_p is None or not self.sigma_p > 0.0 or not math.isfinite(self.sigma_p):
                raise ValueError("truncated_gaussian mode needs sigma_p > 0")

    def scale_bounds(self) -> tuple[float, float]:
        if self.mode == "grid":
            return min(self.grid), max(self.grid)
        return 1.0 - TRUNCATION * self.sigma_p, 1.0 + TRUNCATION * self.sigma_p


def scaled_env(env, scales: dict):
    """Copy of ``env`` with each named parameter multiplied by its scale."""
    params = base_env(env).params
    known = {f.name for f in fields(params)}
    unknown = set(scales) - known
    if unknown:
        raise ValueError(f"unknown parameters {sorted(unknown)}; choose from {sorted(known)}")
    return env.with_params(**{name: getattr(params, name) * s for name, s in scales.items()})


# -- policy pools --------------------------------------------------------------------------

def load_pool(checkpoint) -> list[tuple[int, GaussianTanhPolicy]]:
    """Snapshots ``[(epoch, policy), ...]`` from a path or an in-memory pool.

    A path may name a ``policies.npz`` file or a directory holding one. A bare
    policy is treated as a pool of one.
    """
    if isinstance(checkpoint, GaussianTanhPolicy):
        return [(0, checkpoint)]
    if isinstance(checkpoint, (str, Path)):
        path = Path(checkpoint)
        if path.is_dir():
            path = path / "policies.npz"
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return load_policies(path)
    pool = list(checkpoint)
    if not pool:
        raise ValueError("empty policy pool")
    return [(int(e), p) for e, p in pool]


def _checkpoint_id(checkpoint, index: int) -> str:
    return str(checkpoint) if isinstance(checkpoint, (str, Path)) else f"memory:{index}"


def choose_policies(pool, count: int, rng: np.random.Generator) -> list[int]:
    """Indices of ``count`` distinct snapshots drawn uniformly from ``pool``."""
    if count < 1 or count > len(pool):
        raise ValueError(f"cannot draw {count} distinct policies from a pool of {len(pool)}")
    return sorted(int(i) for i in rng.choice(len(pool), size=count, replace=False))


def run_episode(policy: GaussianTanhPolicy, env, reset_seed: int, action_rng=None) -> float:
    """Undiscounted return of one episode; mean action unless ``action_rng`` is given."""
    obs = env.reset(int(reset_seed))
    total = 0.0
    while not env.finished:
        if action_rng is None:
            action = policy_mean_action(policy, obs)
        else:
            action, _ = policy_sample(policy, obs, action_rng.standard_normal(policy.act_dim))
        obs, r, _ = env.step(action)
        total += r
    return total


# -- grid sweeps -----------------------------------------------------------------------------

@dataclass(frozen=True)
class CellStats:
    scale_x: float
    scale_y: float
    n_episodes: int
    mean: float
    std: float
    min: float
    max: float


@dataclass
class SweepResult:
    """Per-episode returns of a grid sweep plus per-cell summaries.

    ``episodes`` rows are ``(scale_x, scale_y, seed, policy_id, episode, return)``.
    """

    parameter_x: str
    parameter_y: str
    episodes: list
    cells: list
    metadata: dict = field(default_factory=dict)

    def cell(self, scale_x: float, scale_y: float) -> CellStats:
        for c in self.cells:
            if c.scale_x == scale_x and c.scale_y == scale_y:
                return c
        raise KeyError((scale_x, scale_y))

    def cell_returns(self, scale_x: float, scale_y: float) -> np.ndarray:
        return np.array([row[5] for row in self.episodes if row[0] == scale_x and row[1] == scale_y])


def summarize(scale_x: float, scale_y: float, returns) -> CellStats:
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        raise ValueError("a cell needs at least one episode")
    return CellStats(scale_x, scale_y, int(r.size), float(r.mean()), float(r.std()), float(r.min()), float(r.max()))


def _sweep_cell(env, scales, pools, chosen, reset_seeds, stochastic, action_seed):
    cell_env = scaled_env(env, scales)
    rows = []
    for seed_idx, ids in enumerate(chosen):
        for pid in ids:
            policy = pools[seed_idx][pid][1]
            for ep, reset_seed in enumerate(reset_seeds):
                rng = np.random.default_rng([action_seed, seed_idx, pid, ep]) if stochastic else None
                rows.append((seed_idx, pid, ep, run_episode(policy, cell_env, reset_seed, rng)))
    return rows


def grid_sweep(checkpoints: list, env, spec_x: PerturbationSpec, spec_y: PerturbationSpec,
               episodes_per_policy: int = 8, policies_per_seed: int = 4, *, selection_seed: int = 0,
               eval_seed: int = 10_000, reset_seeds=None, stochastic: bool = False,
               jobs: int = 1) -> SweepResult:
    """Evaluate policy pools (one per training seed) on every cell of a 2-D scale grid.

    Each seed contributes ``policies_per_seed`` snapshots drawn with
    ``selection_seed``; every policy runs ``episodes_per_policy`` episodes from
    reset seeds ``eval_seed + k`` (or ``reset_seeds``), so all cells see the
    same initial states. Cells are independent and may run on ``jobs`` processes.
    """
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    for spec in (spec_x, spec_y):
        if spec.mode != "grid":
            raise ValueError("grid_sweep needs grid-mode specs")
    if spec_x.parameter == spec_y.parameter and len(spec_x.grid) > 1 and len(spec_y.grid) > 1:
        raise ValueError("the two axes must perturb different parameters")
    if reset_seeds is None:
        if episodes_per_policy < 1:
            raise ValueError("episodes_per_policy must be positive")
        reset_seeds = [eval_seed + k for k in range(episodes_per_policy)]
    reset_seeds = [int(s) for s in reset_seeds]
    pools = [load_pool(c) for c in checkpoints]
    chosen = [choose_policies(pool, policies_per_seed, np.random.default_rng([selection_seed, i]))
              for i, pool in enumerate(pools)]

    cells = [(sx, sy) for sx in spec_x.grid for sy in spec_y.grid]

    def scales_for(sx, sy):
        if spec_x.parameter == spec_y.parameter:
            return {spec_x.parameter: sx * sy}
        return {spec_x.parameter: sx, spec_y.parameter: sy}

    args = [(env, scales_for(sx, sy), pools, chosen, reset_seeds, stochastic, selection_seed) for sx, sy in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_sweep_cell, *zip(*args)))
    else:
        outputs = [_sweep_cell(*a) for a in args]

    episodes, stats = [], []
    for (sx, sy), rows in zip(cells, outputs):
        episodes.extend((sx, sy, s, p, e, r) for s, p, e, r in rows)
        stats.append(summarize(sx, sy, [r for *_, r in rows]))
    metadata = {
        "checkpoints": [_checkpoint_id(c, i) for i, c in enumerate(checkpoints)],
        "seeds": list(range(len(checkpoints))),
        "policy_epochs": [[pools[i][p][0] for p in ids] for i, ids in enumerate(chosen)],
        "policies_per_seed": policies_per_seed,
        "episodes_per_policy": len(reset_seeds),
        "reset_seeds": reset_seeds,
        "selection_seed": selection_seed,
        "actions": "stochastic" if stochastic else "mean",
    }
    return SweepResult(spec_x.parameter, spec_y.parameter, episodes, stats, metadata)


def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param_x", "param_y", "seed", "policy_id", "episode", "return"])
        for sx, sy, seed, pid, ep, ret in result.episodes:
            w.writerow([repr(sx), repr(sy), seed, pid, ep, repr(ret)])


def write_summary_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param_x", "param_y", "n_episodes", "mean", "std", "min", "max"])
        for c in result.cells:
            w.writerow([repr(c.scale_x), repr(c.scale_y), c.n_episodes, repr(c.mean), repr(c.std),
                        repr(c.min), repr(c.max)])


# -- truncated-Gaussian sweeps -----------------------------------------------------------------

def truncated_normal(rng: np.random.Generator, size: int, bound: float = TRUNCATION) -> np.ndarray:
    """Standard normal draws conditioned on ``|xi| <= bound``, by rejection."""
    if not bound > 0.0:
        raise ValueError("bound must be positive")
    out = np.empty(0)
    while out.size < size:
        draw = rng.standard_normal(max(2 * (size - out.size), 16))
        out = np.concatenate([out, draw[np.abs(draw) <= bound]])
    return out[:size]


def truncated_normal_moments(bound: float = TRUNCATION) -> tuple[float, float]:
    """Mean and standard deviation of a standard normal truncated symmetrically at ``bound``."""
    pdf = math.exp(-0.5 * bound * bound) / math.sqrt(2.0 * math.pi)
    mass = math.erf(bound / math.sqrt(2.0))
    return 0.0, math.sqrt(1.0 - 2.0 * bound * pdf / mass)


@dataclass
class GaussianSweepResult:
    parameters: list
    xi: np.ndarray  # (n_samples, n_params)
    scales: np.ndarray  # 1 + sigma_p * xi
    policy_ids: list  # (seed index, snapshot index) per sample
    returns: np.ndarray


def gaussian_sweep(checkpoints: list, env, specs: list, n_samples: int = 1000, *, seed: int = 0,
                   eval_seed: int = 20_000, stochastic: bool = False) -> GaussianSweepResult:
    """One episode per sampled parameter vector with a policy drawn from the pooled snapshots."""
    if not specs:
        raise ValueError("need at least one perturbation spec")
    for spec in specs:
        if spec.mode != "truncated_gaussian":
            raise ValueError("gaussian_sweep needs truncated_gaussian specs")
    if len({s.parameter for s in specs}) != len(specs):
        raise ValueError("each parameter may appear once")
    pools = [load_pool(c) for c in checkpoints]
    pooled = [(i, j) for i, pool in enumerate(pools) for j in range(len(pool))]
    if not pooled:
        raise ValueError("need at least one checkpoint")
    rng = np.random.default_rng(seed)
    xi = np.stack([truncated_normal(rng, n_samples) for _ in specs], axis=1)
    sigma = np.array([s.sigma_p for s in specs])
    scales = 1.0 + sigma * xi
    picks = rng.integers(len(pooled), size=n_samples)
    returns = np.empty(n_samples)
    ids = []
    for k in range(n_samples):
        i, j = pooled[int(picks[k])]
        ids.append((i, j))
        cell_env = scaled_env(env, {s.parameter: float(scales[k, c]) for c, s in enumerate(specs)})
        action_rng = np.random.default_rng([seed, k]) if stochastic else None
        returns[k] = run_episode(pools[i][j][1], cell_env, eval_seed + k, action_rng)
    return GaussianSweepResult([s.parameter for s in specs], xi, scales, ids, returns)


def write_samples_csv(result: GaussianSweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample"] + [f"scale_{p}" for p in result.parameters] + ["return"])
        for k, ret in enumerate(result.returns):
            w.writerow([k] + [repr(float(s)) for s in result.scales[k]] + [repr(float(ret))])


# -- local linearity -------------------------------------------------------------------------------

@dataclass
class ProbeResult:
    offsets: np.ndarray  # shared by both axes
    delta: np.ndarray  # delta[i, j] at s + offsets[i] x + offsets[j] y

    def plane_fit(self) -> tuple[np.ndarray, float, float]:
        """Least-squares plane ``c0 + c1 u + c2 v``: coefficients, max residual, R^2."""
        u, v = np.meshgrid(self.offsets, self.offsets, indexing="ij")
        design = np.stack([np.ones(u.size), u.ravel(), v.ravel()], axis=1)
        target = self.delta.ravel()
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        resid = target - design @ coef
        total = float(((target - target.mean()) ** 2).sum())
        r2 = 1.0 - float((resid**2).sum()) / total if total > 0.0 else 1.0
        return coef, float(np.abs(resid).max()), r2


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("direction must be non-zero")
    return v / n


def linearity_probe(critic, policy: GaussianTanhPolicy, s, x, y, half_width: float, grid_n: int = 21,
                    n_noise: int = 1000, seed: int = 0) -> ProbeResult:
    """Change of ``E_delta[Q_min(s', f(delta; s'))]`` over a plane of states around ``s``.

    ``critic`` is a pair of networks or a single one. Directions are normalised
    and must be orthogonal. ``n_noise=1`` uses ``delta = 0`` (the mean action).
    ``grid_n`` must be odd so the centre offset is exactly zero.
    """
    q1, q2 = critic if isinstance(critic, (tuple, list)) else (critic, critic)
    x, y = _unit(x), _unit(y)
    if abs(float(x @ y)) >= 1e-8:
        raise ValueError("probe directions must be orthogonal")
    if grid_n < 3 or grid_n % 2 == 0 or not half_width > 0.0:
        raise ValueError("grid_n must be odd and >= 3 and half_width positive")
    m = grid_n // 2
    offsets = half_width * np.arange(-m, m + 1) / m
    noise = (np.zeros((1, policy.act_dim)) if n_noise == 1
             else np.random.default_rng(seed).standard_normal((n_noise, policy.act_dim)))
    s = np.asarray(s, dtype=np.float64)
    u, v = np.meshgrid(offsets, offsets, indexing="ij")
    states = s + u.reshape(-1, 1) * x + v.reshape(-1, 1) * y

    def value(points):
        k = noise.shape[0]
        rows = np.repeat(points, k, axis=0)
        actions = policy_forward(policy, rows, np.tile(noise, (points.shape[0], 1))).action
        q = critic_min(q1, q2, np.concatenate([rows, actions], axis=1)).q_min
        return q.reshape(points.shape[0], k).mean(axis=1)

    grid = value(states).reshape(grid_n, grid_n)
    return ProbeResult(offsets, grid - grid[m, m])


def write_probe_csv(result: ProbeResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u\\v"] + [repr(float(o)) for o in result.offsets])
        for o, row in zip(result.offsets, result.delta):
            w.writerow([repr(float(o))] + [repr(float(d)) for d in row])


# -- domain randomisation ---------------------------------------------------------------------------

def domain_randomized_train(agent: AgentState, env, spec: PerturbationSpec, steps: int,
                            config: TrainConfig | None = None, streams=None, **kwargs) -> TrainingLog:
    """Plain SAC training with one parameter resampled uniformly at every episode reset.

    The range is ``[min(grid), max(grid)]``, relative to ``env``'s parameters,
    drawn from the domain stream; sampled scales are kept in ``log.domain_scales``.
    """
    if spec.mode != "grid":
        raise ValueError("domain randomisation reads its range from a grid-mode spec")
    if agent.epsilon != 0.0:
        raise ValueError("domain-randomised training is the plain (epsilon = 0) baseline")
    lo, hi = spec.scale_bounds()
    scaled_env(env, {spec.parameter: 1.0})  # validates the parameter name
    scales = []

    def hook(_current, rng):
        scale = float(rng.uniform(lo, hi))
        scales.append(scale)
        return scaled_env(env, {spec.parameter: scale})

    log = train(agent, env, steps, config, streams, reset_hook=hook, **kwargs)
    log.domain_scales = scales
    return log


# -- timing ------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class TimingConfig:
    label: str
    env: object
    agent: AgentConfig = field(default_factory=AgentConfig)
    algorithm: str = "sc_sac"
    batch_size: int = 256
    seed: int = 0

    @property
    def is_reference(self) -> bool:
        return self.algorithm == "sac"


@dataclass(frozen=True)
class TimingRow:
    label: str
    windows: tuple  # seconds per window
    mean: float
    std: float


@dataclass
class TimingReport:
    rows: list
    reference: str | None
    overhead: dict  # label -> (ratio, std)
    published_overhead: float = PUBLISHED_OVERHEAD


def time_training(config: TimingConfig, windows: int = 5, window_steps: int = 1000,
                  warmup_steps: int = 1000) -> TimingRow:
    """Wall-clock seconds for consecutive ``window_steps``-step training windows.

    The first window (random actions, updates already running) is discarded.
    """
    if windows < 5:
        raise ValueError("need at least five measured windows")
    train_cfg = TrainConfig(batch_size=config.batch_size, epoch_len=window_steps, start_steps=warmup_steps,
                            update_after=config.batch_size, eval_episodes=0, algorithm=config.algorithm)
    streams = make_streams(config.seed)
    agent = AgentState.create(config.env.obs_dim, config.env.act_dim, config.agent, streams.init, streams.policy)
    stamps = []
    train(agent, config.env, warmup_steps + windows * window_steps, train_cfg, streams,
          callback=lambda rec, _agent: stamps.append(time.perf_counter()))
    # epoch boundaries: the first stamp closes the warmup window when it is one window long
    n_warm = -(-warmup_steps // window_steps)
    times = np.diff(np.array(stamps[n_warm - 1:]))
    return TimingRow(config.label, tuple(float(t) for t in times), float(times.mean()), float(times.std(ddof=1)))


def timing_report(configs: list, windows: int = 5, window_steps: int = 1000,
                  warmup_steps: int = 1000) -> TimingReport:
    """Per-config time per window and the overhead of each config over the plain-SAC reference.

    The ratio's spread propagates both relative standard deviations.
    """
    if not configs:
        raise ValueError("need at least one timing config")
    if warmup_steps % window_steps:
        raise ValueError("warmup_steps must be a whole number of windows")
    rows = [time_training(c, windows, window_steps, warmup_steps) for c in configs]
    ref = next((r for c, r in zip(configs, rows) if c.is_reference), None)
    overhead = {}
    if ref is not None:
        for r in rows:
            ratio = r.mean / ref.mean
            overhead[r.label] = (ratio, ratio * math.hypot(r.std / r.mean, ref.std / ref.mean))
    return TimingReport(rows, None if ref is None else ref.label, overhead)


def write_timing_csv(report: TimingReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "mean_s", "std_s", "windows", "overhead", "overhead_std", "published_overhead"])
        for r in report.rows:
            ratio, spread = report.overhead.get(r.label, (None, None))
            w.writerow([r.label, repr(r.mean), repr(r.std), len(r.windows),
                        "" if ratio is None else repr(ratio), "" if spread is None else repr(spread),
                        repr(report.published_overhead)])


__all__ = [
    "SIGMA_P_DEFAULTS", "CellStats", "GaussianSweepResult", "PerturbationSpec", "ProbeResult", "SweepResult", "TimingConfig",
    "TimingReport", "TimingRow", "choose_policies", "domain_randomized_train", "gaussian_sweep", "grid_sweep",
    "linearity_probe", "load_pool", "run_episode", "scaled_env", "summarize", "time_training", "timing_report",
    "truncated_normal", "truncated_normal_moments", "write_probe_csv", "write_samples_csv", "write_summary_csv",
    "write_sweep_csv", "write_timing_csv",
]
