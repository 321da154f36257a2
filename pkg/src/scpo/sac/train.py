"""Off-policy training loop shared by SC-SAC and the plain SAC reference."""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from scpo.nn import GaussianTanhPolicy, load_checkpoint, policy_mean_action, policy_sample, save_checkpoint
from scpo.sac.agent import AgentConfig, AgentState, DivergenceError, save_agent, sc_sac_update
from scpo.sac.buffer import DEFAULT_CAPACITY, ReplayBuffer
from scpo.sac.vanilla import sac_update

ALGORITHMS = {"sc_sac": sc_sac_update, "sac": sac_update}


class Streams(NamedTuple):
    """Independent generators for each source of randomness in a run."""

    init: np.random.Generator
    policy: np.random.Generator
    buffer: np.random.Generator
    env: np.random.Generator
    domain: np.random.Generator


def make_streams(seed: int) -> Streams:
    return Streams(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)))


@dataclass
class TrainConfig:
    batch_size: int = 256
    epoch_len: int = 1000
    start_steps: int = 1000  # uniform random actions before this many env steps
    update_after: int = 1000  # first gradient step once the buffer holds this many transitions
    buffer_capacity: int = DEFAULT_CAPACITY
    algorithm: str = "sc_sac"
    eval_episodes: int = 5
    eval_seed: int = 10_000
    snapshot_epochs: int = 10
    log_path: str | None = None
    timing_log_path: str | None = None  # when set, wall times go here and log_path stays reproducible
    checkpoint_dir: str | None = None

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {sorted(ALGORITHMS)}")
        if min(self.batch_size, self.epoch_len, self.buffer_capacity) < 1:
            raise ValueError("batch_size, epoch_len and buffer_capacity must be positive")
        if self.start_steps < 0 or self.update_after < 0 or self.eval_episodes < 0:
            raise ValueError("step thresholds and eval_episodes must be non-negative")


LOG_FIELDS = ("epoch", "env_steps", "episodes", "mean_return", "eval_return", "loss_q1", "loss_q2",
              "loss_actor", "loss_alpha", "alpha", "gbr_fraction", "wall_time_ms")


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (epoch, GaussianTanhPolicy) for the last epochs
    episode_returns: list = field(default_factory=list)
    domain_scales: list = field(default_factory=list)  # filled by parameter-randomised training
    buffer: ReplayBuffer | None = None

    def column(self, name: str) -> list:
        return [rec[name] for rec in self.records]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def evaluate_policy(policy: GaussianTanhPolicy, env, seeds) -> list[float]:
    """Undiscounted returns of the mean action from the given reset seeds."""
    returns = []
    for seed in seeds:
        obs = env.reset(int(seed))
        total = 0.0
        while not env.finished:
            obs, r, _ = env.step(policy_mean_action(policy, obs))
            total += r
        returns.append(total)
    return returns


def _mean(values):
    return float(np.mean(values)) if len(values) else None


def train(agent: AgentState, env, steps: int, config: TrainConfig | None = None,
          streams: Streams | None = None,
          reset_hook: Callable | None = None,
          callback: Callable[[dict, AgentState], None] | None = None) -> TrainingLog:
    """Run ``steps`` environment steps with one gradient update per step.

    ``streams`` supplies the buffer, env and domain generators (the agent owns
    the policy stream). ``reset_hook(env, rng)`` is called before every
    episode reset with the domain stream and returns the environment to use
    for that episode. Per-epoch records go to ``config.log_path`` as JSONL;
    the agent is checkpointed at the end and before re-raising a divergence.
    """
    config = TrainConfig() if config is None else config
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if (env.obs_dim, env.act_dim) != (agent.obs_dim, agent.act_dim):
        raise ValueError("environment and agent dimensions differ")
    streams = make_streams(0) if streams is None else streams
    update = ALGORITHMS[config.algorithm]
    buffer = ReplayBuffer(agent.obs_dim, agent.act_dim, min(config.buffer_capacity, max(steps, 1)))
    log = TrainingLog(buffer=buffer)
    snapshots = deque(maxlen=max(config.snapshot_epochs, 1))
    eval_env = env.with_params()  # separate instance so evaluation never interrupts an episode
    eval_seeds = [config.eval_seed + i for i in range(config.eval_episodes)]
    log_fh = open(config.log_path, "w") if config.log_path else None
    timing_fh = open(config.timing_log_path, "w") if config.timing_log_path else None

    def next_episode():
        nonlocal env
        if reset_hook is not None:
            env = reset_hook(env, streams.domain)
        return env.reset(int(streams.env.integers(2**63 - 1)))

    try:
        obs = next_episode()
        ep_return, epoch_returns, stats = 0.0, [], []
        t0 = time.perf_counter()
        for t in range(steps):
            if t < config.start_steps:
                action = agent.rng.uniform(-1.0, 1.0, size=agent.act_dim)
            else:
                action, _ = policy_sample(agent.policy, obs, agent.rng.standard_normal(agent.act_dim))
            obs_next, reward, done = env.step(action)
            buffer.add(obs, action, reward, obs_next, done)
            ep_return += reward
            obs = obs_next
            if env.finished:
                epoch_returns.append(ep_return)
                log.episode_returns.append(ep_return)
                ep_return = 0.0
                obs = next_episode()
            if len(buffer) >= max(config.update_after, 1):
                stats.append(update(agent, buffer.sample(streams.buffer, config.batch_size)))
            if (t + 1) % config.epoch_len == 0:
                epoch = (t + 1) // config.epoch_len
                rec = _epoch_record(epoch, t + 1, epoch_returns, stats, agent, eval_env, eval_seeds, t0)
                log.records.append(rec)
                snapshots.append((epoch, agent.policy.copy()))
                if timing_fh:
                    timing_fh.write(json.dumps({"epoch": epoch, "wall_time_ms": rec["wall_time_ms"]}) + "\n")
                    timing_fh.flush()
                if log_fh:
                    shown = {k: v for k, v in rec.items() if not (timing_fh and k == "wall_time_ms")}
                    log_fh.write(json.dumps(shown, sort_keys=True) + "\n")
                    log_fh.flush()
                if callback is not None:
                    callback(rec, agent)
                epoch_returns, stats = [], []
                t0 = time.perf_counter()
    except DivergenceError:
        if config.checkpoint_dir:
            _write_checkpoints(config, agent, list(snapshots), aborted=True)
        raise
    finally:
        for fh in (log_fh, timing_fh):
            if fh:
                fh.close()
    log.snapshots = list(snapshots)
    if config.checkpoint_dir:
        _write_checkpoints(config, agent, log.snapshots, aborted=False)
    return log


def _epoch_record(epoch, env_steps, returns, stats, agent, eval_env, eval_seeds, t0) -> dict:
    rec = {
        "epoch": epoch,
        "env_steps": env_steps,
        "episodes": len(returns),
        "mean_return": _mean(returns),
        "eval_return": _mean(evaluate_policy(agent.policy, eval_env, eval_seeds)) if eval_seeds else None,
        "loss_q1": _mean([s.loss_q1 for s in stats]),
        "loss_q2": _mean([s.loss_q2 for s in stats]),
        "loss_actor": _mean([s.loss_actor for s in stats]),
        "loss_alpha": _mean([s.loss_alpha for s in stats]),
        "alpha": agent.alpha,
        "gbr_fraction": _mean([s.gbr_fraction for s in stats]),
    }
    for key, value in rec.items():
        if isinstance(value, float) and not np.isfinite(value):
            raise DivergenceError(f"logged {key}", {key: value})
    rec["wall_time_ms"] = (time.perf_counter() - t0) * 1000.0
    return rec


def _write_checkpoints(config: TrainConfig, agent: AgentState, snapshots, aborted: bool) -> None:
    out = Path(config.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_agent(out / "agent.npz", agent, {"aborted": aborted, "train": asdict(config)})
    if snapshots:
        save_policies(out / "policies.npz", snapshots)


def save_policies(path, snapshots) -> None:
    """Policy snapshots ``[(epoch, policy), ...]`` in one checkpoint file."""
    save_checkpoint(path, {f"epoch_{e:06d}": p.trunk for e, p in snapshots},
                    meta={"epochs": [int(e) for e, _ in snapshots]})


def load_policies(path) -> list[tuple[int, GaussianTanhPolicy]]:
    nets, _, meta = load_checkpoint(path)
    return [(e, GaussianTanhPolicy(nets[f"epoch_{e:06d}"])) for e in meta["epochs"]]


def run_training(env, steps: int, seed: int, agent_config: AgentConfig | None = None,
                 train_config: TrainConfig | None = None, **kwargs) -> tuple[AgentState, TrainingLog]:
    """Build an agent from ``seed``'s init/policy streams and train it."""
    streams = make_streams(seed)
    agent = AgentState.create(env.obs_dim, env.act_dim, agent_config, streams.init, streams.policy)
    return agent, train(agent, env, steps, train_config, streams, **kwargs)
