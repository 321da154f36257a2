"""Run configuration: dotted ``key = value`` files, typed defaults and overrides."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration input; carries the file line when there is one."""

    def __init__(self, message: str, lineno: int | None = None, source: str | None = None):
        where = ""
        if source is not None:
            where = f"{source}:"
        if lineno is not None:
            where += f"line {lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.lineno = lineno


@dataclass(frozen=True)
class Key:
    kind: str  # int, float, str, bool, ints, floats, strs, optfloat
    default: object
    help: str = ""


SCHEMA: dict[str, Key] = {
    "seed": Key("int", 0, "base seed; train runs use train.seeds when given"),
    # environment
    "env.name": Key("str", "pendulum", "pendulum or cartpole"),
    "env.normalizer": Key("str", "fit", "'fit', 'identity' or a path to a normalizer JSON file"),
    "env.fit_steps": Key("int", 10_000, "random-action steps used to fit the observation normalizer"),
    "env.params.mass": Key("optfloat", None, "pendulum tip mass (kg)"),
    "env.params.length": Key("optfloat", None, "pendulum length (m)"),
    "env.params.damping_friction": Key("optfloat", None, "pendulum joint damping (N m s)"),
    "env.params.cart_mass": Key("optfloat", None, "cart-pole cart mass (kg)"),
    "env.params.pole_mass": Key("optfloat", None, "cart-pole pole mass (kg)"),
    "env.params.pole_length": Key("optfloat", None, "cart-pole full pole length (m)"),
    "env.params.track_friction": Key("optfloat", None, "cart-pole track friction coefficient"),
    # agent
    "agent.epsilon": Key("float", 0.005, "radius of the state disturbance ball"),
    "agent.gamma": Key("float", 0.99, "discount"),
    "agent.tau": Key("float", 0.005, "target network blend"),
    "agent.lr": Key("float", 3e-4, "Adam step size for all networks"),
    "agent.batch": Key("int", 256, "minibatch size"),
    "agent.buffer": Key("int", 1_000_000, "replay capacity"),
    "agent.hidden": Key("ints", [256, 256], "hidden layer widths"),
    "agent.activation": Key("str", "relu", "relu or tanh"),
    "agent.init_alpha": Key("float", 1.0, "initial entropy temperature"),
    "agent.ablation": Key("str", "full", "full, sce_only or sci_only"),
    "agent.gbr_grad": Key("str", "full", "actor regulariser gradient: full or truncated"),
    "agent.algorithm": Key("str", "sc_sac", "sc_sac or sac"),
    # training
    "train.steps": Key("int", 100_000, "environment steps per seed"),
    "train.seeds": Key("ints", [], "training seeds; empty means [seed]"),
    "train.epsilons": Key("floats", [], "train one run per radius (sensitivity sweep); empty means agent.epsilon"),
    "train.epoch_len": Key("int", 1000, "steps per logged epoch"),
    "train.start_steps": Key("int", 1000, "uniform random actions before this step"),
    "train.update_after": Key("int", 1000, "first update once the buffer holds this many transitions"),
    "train.eval_episodes": Key("int", 5, "mean-action evaluation episodes per epoch"),
    "train.eval_seed": Key("int", 10_000, "first reset seed of the evaluation episodes"),
    "train.snapshot_epochs": Key("int", 10, "policy snapshots kept from the last epochs"),
    "train.randomize": Key("str", "", "parameter resampled at every reset (domain randomisation)"),
    "train.randomize_range": Key("floats", [0.5, 1.5], "relative range for train.randomize"),
    # evaluation
    "eval.checkpoints": Key("strs", [], "training run or seed directories"),
    "eval.mode": Key("str", "grid", "grid or gaussian"),
    "eval.param_x": Key("str", "mass", "grid x parameter"),
    "eval.grid_x": Key("floats", [0.5, 0.7, 0.9, 1.0, 1.1, 1.3, 1.5], "relative scales on x"),
    "eval.param_y": Key("str", "damping_friction", "grid y parameter"),
    "eval.grid_y": Key("floats", [1.0], "relative scales on y"),
    "eval.episodes_per_policy": Key("int", 8, "episodes per sampled policy"),
    "eval.policies_per_seed": Key("int", 4, "policies drawn from each seed's snapshots"),
    "eval.gaussian_params": Key("strs", ["mass", "damping_friction"], "parameters perturbed in gaussian mode"),
    "eval.sigma_p": Key("floats", [], "relative std per gaussian parameter; empty means environment defaults"),
    "eval.samples": Key("int", 1000, "episodes in gaussian mode"),
    "eval.stochastic": Key("bool", False, "sample actions instead of using the mean action"),
    "eval.jobs": Key("int", 1, "worker processes for grid cells"),
    "eval.seed": Key("int", 0, "policy selection and parameter sampling seed"),
    "eval.eval_seed": Key("int", 10_000, "first episode reset seed"),
    # probe
    "probe.checkpoint": Key("str", "", "seed directory holding agent.npz"),
    "probe.state": Key("floats", [], "centre state (normalised); empty means a reset state"),
    "probe.x": Key("floats", [], "first direction; empty means the first axis"),
    "probe.y": Key("floats", [], "second direction; empty means the second axis"),
    "probe.half_width": Key("float", 0.005, "largest offset along each direction"),
    "probe.grid_n": Key("int", 21, "odd number of offsets per direction"),
    "probe.noise": Key("int", 1000, "Monte-Carlo action draws; 1 means the mean action"),
    "probe.seed": Key("int", 0, "noise and reset seed"),
    # tabular solver
    "solve.mdp": Key("str", "", "MDP text file"),
    "solve.epsilon": Key("float", 0.0, "ball radius on the state embedding"),
    "solve.metric": Key("str", "linf", "ball metric"),
    "solve.tol": Key("float", 1e-10, "policy-evaluation tolerance"),
    "solve.improvement": Key("str", "pointwise", "pointwise or ball greedy step"),
    "solve.max_iters": Key("int", 1000, "policy iteration cap"),
    # timing
    "timing.windows": Key("int", 5, "measured windows"),
    "timing.window_steps": Key("int", 1000, "training steps per window"),
    "timing.warmup_steps": Key("int", 1000, "discarded warmup steps"),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_value(key: str, text: str):
    """Typed value of ``text`` for ``key``; raises ConfigError on unknown keys or bad values."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}")
    kind = SCHEMA[key].kind
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "optfloat":
            return None if text.lower() in ("", "none", "default") else float(text)
        if kind == "str":
            return text
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        items = [t.strip() for t in text.strip("[]").split(",") if t.strip()]
        if kind == "ints":
            return [int(t) for t in items]
        if kind == "floats":
            return [float(t) for t in items]
        if kind == "strs":
            return items
    except ValueError:
        raise ConfigError(f"bad {kind} value {text!r} for {key}") from None
    raise AssertionError(kind)


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_config_text(text: str, source: str | None = None) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Later lines win."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = parse_value(key, value)
        except ConfigError as err:
            raise ConfigError(str(err), lineno, source) from None
    return values


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from None
    return parse_config_text(text, str(path))


class RunConfig(dict):
    """Fully resolved configuration: every schema key present."""

    @classmethod
    def resolve(cls, file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
        """Defaults, then file values, then command-line overrides."""
        cfg = cls({k: _copy(spec.default) for k, spec in SCHEMA.items()})
        for layer in (file_values or {}, overrides or {}):
            for key, value in layer.items():
                if key not in SCHEMA:
                    raise ConfigError(f"unknown key {key!r}")
                cfg[key] = value
        return cfg

    def section(self, prefix: str) -> dict:
        return {k[len(prefix) + 1:]: v for k, v in self.items() if k.startswith(prefix + ".")}

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(self[k])}\n" for k in sorted(self))

    def digest(self, length: int = 12) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:length]


def _copy(value):
    return list(value) if isinstance(value, list) else value


def parse_assignment(text: str) -> tuple[str, object]:
    """``key=value`` from a ``--set`` flag."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    return key, parse_value(key, value)
