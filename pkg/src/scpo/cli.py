"""Command-line entry point: ``scpo solve|train|eval|probe|timing``.

Settings come from built-in defaults, then an optional ``--config`` file of
dotted ``key = value`` lines, then ``--set key=value`` and the per-command
shortcut flags. Every run writes into its own directory under ``--out``
(or ``$SCPO_OUTPUT_ROOT``, or ``./runs``) together with the resolved config.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from scpo.config import SCHEMA, ConfigError, RunConfig, parse_assignment, parse_value, read_config_file
from scpo.envs import ENVIRONMENTS, NormalizedEnv, ObsNormalizer, fit_normalizer, sample_observations
from scpo.harness import (
    SIGMA_P_DEFAULTS,
    PerturbationSpec,
    TimingConfig,
    domain_randomized_train,
    gaussian_sweep,
    grid_sweep,
    linearity_probe,
    timing_report,
    write_probe_csv,
    write_samples_csv,
    write_summary_csv,
    write_sweep_csv,
    write_timing_csv,
)
from scpo.mdp import ConvergenceError, EpsilonBall, sc_policy_iteration
from scpo.mdp.io import MdpParseError, load_mdp, write_policy_csv, write_values_csv
from scpo.sac import AgentConfig, AgentState, DivergenceError, TrainConfig, load_agent, make_streams, train

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
OUTPUT_ROOT_VAR = "SCPO_OUTPUT_ROOT"
ENV_PARAM_KEYS = ("mass", "length", "damping_friction", "cart_mass", "pole_mass", "pole_length", "track_friction")

# (flag, config key, extra argparse options); values are parsed by the config schema
SHORTCUTS = {
    "solve": [
        ("--mdp", "solve.mdp", {}),
        ("--epsilon", "solve.epsilon", {}),
        ("--metric", "solve.metric", {}),
        ("--tol", "solve.tol", {}),
        ("--improvement", "solve.improvement", {}),
    ],
    "train": [
        ("--env", "env.name", {}),
        ("--epsilon", "agent.epsilon", {}),
        ("--epsilons", "train.epsilons", {}),
        ("--seed", "seed", {}),
        ("--seeds", "train.seeds", {}),
        ("--steps", "train.steps", {}),
        ("--ablation", "agent.ablation", {}),
        ("--algorithm", "agent.algorithm", {}),
        ("--normalizer", "env.normalizer", {}),
        ("--fit-normalizer", "env.normalizer", {"action": "store_const", "const": "fit"}),
    ],
    "eval": [
        ("--env", "env.name", {}),
        ("--checkpoints", "eval.checkpoints", {}),
        ("--mode", "eval.mode", {}),
        ("--episodes", "eval.episodes_per_policy", {}),
        ("--policies", "eval.policies_per_seed", {}),
        ("--samples", "eval.samples", {}),
        ("--jobs", "eval.jobs", {}),
        ("--stochastic", "eval.stochastic", {"action": "store_const", "const": "true"}),
    ],
    "probe": [
        ("--env", "env.name", {}),
        ("--checkpoint", "probe.checkpoint", {}),
        ("--half-width", "probe.half_width", {}),
        ("--grid-n", "probe.grid_n", {}),
        ("--noise-draws", "probe.noise", {}),
    ],
    "timing": [
        ("--env", "env.name", {}),
        ("--epsilon", "agent.epsilon", {}),
        ("--windows", "timing.windows", {}),
        ("--window-steps", "timing.window_steps", {}),
    ],
}

DESCRIPTIONS = {
    "solve": "state-conservative policy iteration on a tabular MDP file",
    "train": "train SC-SAC (or plain SAC) agents, one run per seed",
    "eval": "robustness sweeps over physical parameters for trained checkpoints",
    "probe": "local-linearity probe of a trained critic around one state",
    "timing": "wall-clock cost of SC-SAC against plain SAC per training window",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scpo", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="Config keys:\n" + "\n".join(
                                         f"  {k:28s} {spec.help}" for k, spec in SCHEMA.items()))
    sub = parser.add_subparsers(dest="command", required=True)
    for command, flags in SHORTCUTS.items():
        p = sub.add_parser(command, help=DESCRIPTIONS[command], description=DESCRIPTIONS[command])
        p.add_argument("--config", help="key = value file; command-line settings override it")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--out", help=f"output root (default ${OUTPUT_ROOT_VAR} or ./runs)")
        for flag, key, extra in flags:
            opts = {"dest": key, "default": None, "help": f"sets {key}"}
            opts.update(extra)
            if "action" not in extra:
                opts["metavar"] = key.split(".")[-1].upper()
            p.add_argument(flag, **opts)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < ``--set`` < shortcut flags."""
    file_values = read_config_file(args.config) if args.config else {}
    overrides = dict(parse_assignment(item) for item in args.set)
    for _, key, _ in SHORTCUTS[args.command]:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = parse_value(key, value)
    return RunConfig.resolve(file_values, overrides)


class RunDir:
    """Output directory named by command, config hash and start time; created on first use."""

    def __init__(self, root: Path, command: str, cfg: RunConfig):
        self.root, self.command, self.cfg = root, command, cfg
        self._path = None

    @property
    def path(self) -> Path:
        if self._path is None:
            stamp = time.strftime("%Y%m%dT%H%M%S")
            base = self.root / f"{self.command}-{self.cfg.digest()}-{stamp}"
            path, n = base, 1
            while path.exists():
                path = Path(f"{base}-{n}")
                n += 1
            path.mkdir(parents=True)
            (path / "config.txt").write_text(f"# scpo {self.command}\n" + self.cfg.to_text())
            self._path = path
        return self._path


def output_root(args) -> Path:
    return Path(args.out or os.environ.get(OUTPUT_ROOT_VAR) or "runs")


# -- shared builders -----------------------------------------------------------------------------

def build_env(cfg: RunConfig):
    name = cfg["env.name"]
    if name not in ENVIRONMENTS:
        raise ConfigError(f"env.name must be one of {sorted(ENVIRONMENTS)}, got {name!r}")
    cls = ENVIRONMENTS[name]
    params = {k: cfg[f"env.params.{k}"] for k in ENV_PARAM_KEYS if cfg[f"env.params.{k}"] is not None}
    valid = set(cls.params_type.__dataclass_fields__)
    bad = sorted(set(params) - valid)
    if bad:
        raise ConfigError(f"{name} has no parameter(s) {bad}; it takes {sorted(valid)}")
    try:
        return cls(cls.params_type(**params))
    except ValueError as err:
        raise ConfigError(str(err)) from None


def load_normalizer(path) -> ObsNormalizer:
    try:
        return ObsNormalizer.from_dict(json.loads(Path(path).read_text()))
    except (OSError, KeyError, ValueError) as err:
        raise ConfigError(f"cannot load normalizer {path}: {err}") from None


def agent_config(cfg: RunConfig, epsilon: float | None = None) -> AgentConfig:
    return AgentConfig(epsilon=cfg["agent.epsilon"] if epsilon is None else epsilon, gamma=cfg["agent.gamma"],
                       tau=cfg["agent.tau"], lr=cfg["agent.lr"], hidden=tuple(cfg["agent.hidden"]),
                       activation=cfg["agent.activation"], init_alpha=cfg["agent.init_alpha"],
                       ablation=cfg["agent.ablation"], gbr_grad=cfg["agent.gbr_grad"])


def _say(*parts) -> None:
    print(*parts, flush=True)


# -- solve -----------------------------------------------------------------------------------------

def cmd_solve(cfg: RunConfig, run: RunDir) -> int:
    if not cfg["solve.mdp"]:
        raise ConfigError("solve.mdp (--mdp) is required")
    try:
        mdp = load_mdp(cfg["solve.mdp"])
    except MdpParseError as err:
        raise ConfigError(str(err), source=cfg["solve.mdp"]) from None
    except OSError as err:
        raise ConfigError(f"cannot read MDP file: {err}") from None
    ball = EpsilonBall(cfg["solve.epsilon"], cfg["solve.metric"])
    result = sc_policy_iteration(mdp, ball, tol=cfg["solve.tol"], max_iters=cfg["solve.max_iters"],
                                 improvement=cfg["solve.improvement"])
    write_policy_csv(run.path / "policy.csv", result.policy)
    write_values_csv(run.path / "values.csv", result.q)
    _say(f"iterations {result.iterations}")
    _say(f"residual {result.residual:.3e}")
    _say(f"run_dir {run.path}")
    if not result.converged:
        print(f"error: policy iteration did not settle within {cfg['solve.max_iters']} iterations",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- train -----------------------------------------------------------------------------------------

def _normalizer_for_training(cfg: RunConfig, env) -> ObsNormalizer:
    choice = cfg["env.normalizer"]
    if choice == "identity":
        return ObsNormalizer.identity(env.obs_dim)
    if choice == "fit":
        return fit_normalizer(sample_observations(env, cfg["env.fit_steps"], cfg["seed"]))
    norm = load_normalizer(choice)
    if norm.mean.shape != (env.obs_dim,):
        raise ConfigError("normalizer dimension does not match the environment")
    return norm


def cmd_train(cfg: RunConfig, run: RunDir) -> int:
    raw_env = build_env(cfg)
    seeds = cfg["train.seeds"] or [cfg["seed"]]
    epsilons = cfg["train.epsilons"] or [cfg["agent.epsilon"]]
    agent_cfgs = [agent_config(cfg, eps) for eps in epsilons]
    train_cfg = TrainConfig(batch_size=cfg["agent.batch"], epoch_len=cfg["train.epoch_len"],
                            start_steps=cfg["train.start_steps"], update_after=cfg["train.update_after"],
                            buffer_capacity=cfg["agent.buffer"], algorithm=cfg["agent.algorithm"],
                            eval_episodes=cfg["train.eval_episodes"], eval_seed=cfg["train.eval_seed"],
                            snapshot_epochs=cfg["train.snapshot_epochs"])
    randomize = None
    if cfg["train.randomize"]:
        lo_hi = cfg["train.randomize_range"]
        if len(lo_hi) != 2:
            raise ConfigError("train.randomize_range needs two scales")
        randomize = PerturbationSpec(cfg["train.randomize"], grid=tuple(lo_hi))
        if any(eps != 0.0 for eps in epsilons):
            raise ConfigError("domain-randomised training runs with agent.epsilon = 0")
        if randomize.parameter not in raw_env.params_type.__dataclass_fields__:
            raise ConfigError(f"unknown parameter {randomize.parameter!r} for {raw_env.name}")
    if cfg["train.steps"] < 0:
        raise ConfigError("train.steps must be non-negative")
    normalizer = _normalizer_for_training(cfg, raw_env)
    env = NormalizedEnv(raw_env, normalizer)
    (run.path / "normalizer.json").write_text(json.dumps(normalizer.to_dict()) + "\n")

    for eps, a_cfg in zip(epsilons, agent_cfgs):
        for seed in seeds:
            out = run.path / (f"eps_{eps!r}" if len(epsilons) > 1 else "") / f"seed_{seed}"
            out.mkdir(parents=True, exist_ok=True)
            t_cfg = TrainConfig(**{**vars(train_cfg), "log_path": str(out / "log.jsonl"),
                                   "timing_log_path": str(out / "wall_time.jsonl"),
                                   "checkpoint_dir": str(out)})
            streams = make_streams(seed)
            agent = AgentState.create(env.obs_dim, env.act_dim, a_cfg, streams.init, streams.policy)
            try:
                if randomize is None:
                    log = train(agent, env, cfg["train.steps"], t_cfg, streams)
                else:
                    log = domain_randomized_train(agent, env, randomize, cfg["train.steps"], t_cfg, streams)
            except DivergenceError as err:
                print(f"error: training diverged (epsilon {eps}, seed {seed}): {err}", file=sys.stderr)
                print(f"details: {json.dumps(err.details, default=str)}", file=sys.stderr)
                print(f"checkpoint: {out / 'agent.npz'}", file=sys.stderr)
                return EXIT_RUNTIME
            final = log.records[-1]["eval_return"] if log.records else None
            _say(f"epsilon {eps} seed {seed} epochs {len(log.records)} eval_return {final}")
    _say(f"run_dir {run.path}")
    return EXIT_OK


# -- eval / probe -----------------------------------------------------------------------------------

def _find_normalizer(cfg: RunConfig, seed_dir: Path, obs_dim: int) -> ObsNormalizer:
    choice = cfg["env.normalizer"]
    if choice == "identity":
        return ObsNormalizer.identity(obs_dim)
    if choice != "fit":
        norm = load_normalizer(choice)
    else:
        for parent in (seed_dir, seed_dir.parent, seed_dir.parent.parent):
            if (parent / "normalizer.json").is_file():
                norm = load_normalizer(parent / "normalizer.json")
                break
        else:
            raise ConfigError(f"no normalizer.json found above {seed_dir}; set env.normalizer")
    if norm.mean.shape != (obs_dim,):
        raise ConfigError("normalizer dimension does not match the environment")
    return norm


def _seed_dirs(path: Path) -> list[Path]:
    return sorted((p for p in path.glob("seed_*") if (p / "policies.npz").is_file()),
                  key=lambda p: int(p.name.split("_", 1)[1]) if p.name.split("_", 1)[1].isdigit() else p.name)


def checkpoint_groups(entries) -> dict[str, list[Path]]:
    """Seed directories grouped by training run (one group per radius in sensitivity runs)."""
    groups: dict[str, list[Path]] = {}
    loose = []
    for entry in entries:
        path = Path(entry)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        if (path / "policies.npz").is_file():
            loose.append(path)
            continue
        eps_dirs = sorted(p for p in path.glob("eps_*") if p.is_dir())
        found = False
        for d in [path] + eps_dirs:
            seeds = _seed_dirs(d)
            if seeds:
                groups[d.name] = seeds
                found = True
        if not found:
            raise FileNotFoundError(f"no policies.npz under {path}")
    if loose:
        groups["checkpoints"] = loose
    return groups


def cmd_eval(cfg: RunConfig, run: RunDir) -> int:
    if not cfg["eval.checkpoints"]:
        raise ConfigError("eval.checkpoints (--checkpoints) is required")
    raw_env = build_env(cfg)
    groups = checkpoint_groups(cfg["eval.checkpoints"])
    mode = cfg["eval.mode"]
    if mode == "grid":
        spec_x = PerturbationSpec(cfg["eval.param_x"], grid=tuple(cfg["eval.grid_x"]))
        spec_y = PerturbationSpec(cfg["eval.param_y"], grid=tuple(cfg["eval.grid_y"]))
        params = [spec_x.parameter, spec_y.parameter]
    elif mode == "gaussian":
        names = cfg["eval.gaussian_params"]
        sigmas = cfg["eval.sigma_p"] or [SIGMA_P_DEFAULTS[raw_env.name].get(n, 0.0) for n in names]
        if len(sigmas) != len(names):
            raise ConfigError("eval.sigma_p needs one value per eval.gaussian_params entry")
        specs = [PerturbationSpec(n, mode="truncated_gaussian", sigma_p=s) for n, s in zip(names, sigmas)]
        params = names
    else:
        raise ConfigError("eval.mode must be grid or gaussian")
    unknown = set(params) - set(raw_env.params_type.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown parameter(s) {sorted(unknown)} for {raw_env.name}")

    for label, seed_dirs in groups.items():
        env = NormalizedEnv(raw_env, _find_normalizer(cfg, seed_dirs[0], raw_env.obs_dim))
        out = run.path / label
        out.mkdir(exist_ok=True)
        if mode == "grid":
            result = grid_sweep([str(d) for d in seed_dirs], env, spec_x, spec_y,
                                cfg["eval.episodes_per_policy"], cfg["eval.policies_per_seed"],
                                selection_seed=cfg["eval.seed"], eval_seed=cfg["eval.eval_seed"],
                                stochastic=cfg["eval.stochastic"], jobs=cfg["eval.jobs"])
            write_sweep_csv(result, out / "episodes.csv")
            write_summary_csv(result, out / "summary.csv")
            (out / "metadata.json").write_text(json.dumps(result.metadata, indent=1) + "\n")
            for c in result.cells:
                _say(f"{label} {spec_x.parameter}={c.scale_x:g} {spec_y.parameter}={c.scale_y:g} "
                     f"n={c.n_episodes} mean={c.mean:.2f} std={c.std:.2f}")
        else:
            result = gaussian_sweep([str(d) for d in seed_dirs], env, specs, cfg["eval.samples"],
                                    seed=cfg["eval.seed"], eval_seed=cfg["eval.eval_seed"],
                                    stochastic=cfg["eval.stochastic"])
            write_samples_csv(result, out / "samples.csv")
            _say(f"{label} samples={result.returns.size} mean={result.returns.mean():.2f} "
                 f"std={result.returns.std():.2f}")
    _say(f"run_dir {run.path}")
    return EXIT_OK


def cmd_probe(cfg: RunConfig, run: RunDir) -> int:
    if not cfg["probe.checkpoint"]:
        raise ConfigError("probe.checkpoint (--checkpoint) is required")
    path = Path(cfg["probe.checkpoint"])
    agent_path = path / "agent.npz" if path.is_dir() else path
    if not agent_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {agent_path}")
    agent, _ = load_agent(agent_path)
    raw_env = build_env(cfg)
    if raw_env.obs_dim != agent.obs_dim:
        raise ConfigError("checkpoint and environment dimensions differ")
    norm = _find_normalizer(cfg, agent_path.parent, raw_env.obs_dim)
    state = np.array(cfg["probe.state"]) if cfg["probe.state"] else \
        norm.normalize(raw_env.reset(cfg["probe.seed"]))
    axes = np.eye(agent.obs_dim)
    x = np.array(cfg["probe.x"]) if cfg["probe.x"] else axes[0]
    y = np.array(cfg["probe.y"]) if cfg["probe.y"] else axes[1]
    for name, vec in (("probe.state", state), ("probe.x", x), ("probe.y", y)):
        if vec.shape != (agent.obs_dim,):
            raise ConfigError(f"{name} needs {agent.obs_dim} entries")
    result = linearity_probe((agent.q1, agent.q2), agent.policy, state, x, y, cfg["probe.half_width"],
                             cfg["probe.grid_n"], cfg["probe.noise"], cfg["probe.seed"])
    coef, max_resid, r2 = result.plane_fit()
    write_probe_csv(result, run.path / "probe.csv")
    fit = {"state": state.tolist(), "coefficients": coef.tolist(), "max_residual": max_resid, "r2": r2}
    (run.path / "fit.json").write_text(json.dumps(fit, indent=1) + "\n")
    _say(f"plane fit r2 {r2:.6f} max_residual {max_resid:.3e}")
    _say(f"run_dir {run.path}")
    return EXIT_OK


# -- timing ----------------------------------------------------------------------------------------

def cmd_timing(cfg: RunConfig, run: RunDir) -> int:
    env = build_env(cfg)
    configs = [
        TimingConfig("sac", env, agent_config(cfg, 0.0), "sac", cfg["agent.batch"], cfg["seed"]),
        TimingConfig("sc_sac", env, agent_config(cfg), "sc_sac", cfg["agent.batch"], cfg["seed"]),
    ]
    if cfg["timing.warmup_steps"] % cfg["timing.window_steps"]:
        raise ConfigError("timing.warmup_steps must be a multiple of timing.window_steps")
    report = timing_report(configs, cfg["timing.windows"], cfg["timing.window_steps"], cfg["timing.warmup_steps"])
    write_timing_csv(report, run.path / "timing.csv")
    for r in report.rows:
        ratio, spread = report.overhead[r.label]
        _say(f"{r.label} {r.mean:.3f} +- {r.std:.3f} s per {cfg['timing.window_steps']} steps "
             f"(overhead {ratio:.3f} +- {spread:.3f})")
    _say(f"published overhead {report.published_overhead}")
    _say(f"run_dir {run.path}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe, "timing": cmd_timing}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, RunDir(output_root(args), args.command, cfg))
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (ConvergenceError, DivergenceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
