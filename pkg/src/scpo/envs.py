"""Toy continuous-control environments with perturbable physical parameters.

Both environments are deterministic ODE steppers. Randomness enters only
through the initial state, drawn from ``reset(seed)``. Actions are vectors in
``[-1, 1]^n`` (clipped) and are scaled to physical units internally.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np


class EpisodeFinishedError(RuntimeError):
    """``step`` was called after termination or truncation without a ``reset``."""


def _check_params(params, positive, non_negative) -> None:
    for name in positive:
        value = getattr(params, name)
        if not (math.isfinite(value) and value > 0.0):
            raise ValueError(f"{name} must be a positive finite number, got {value}")
    for name in non_negative:
        value = getattr(params, name)
        if not (math.isfinite(value) and value >= 0.0):
            raise ValueError(f"{name} must be non-negative and finite, got {value}")


@dataclass(frozen=True)
class PendulumParams:
    mass: float = 1.0  # kg, point mass at the tip
    length: float = 1.0  # m
    damping_friction: float = 0.05  # N m s

    def __post_init__(self) -> None:
        _check_params(self, ("mass", "length"), ("damping_friction",))


@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 1.0  # kg
    pole_mass: float = 0.1  # kg
    pole_length: float = 1.0  # m, full length
    track_friction: float = 0.01  # Coulomb coefficient between cart and track

    def __post_init__(self) -> None:
        _check_params(self, ("cart_mass", "pole_mass", "pole_length"), ("track_friction",))


def wrap_angle(theta):
    """Map angles to ``[-pi, pi)``."""
    return (np.asarray(theta) + math.pi) % (2.0 * math.pi) - math.pi


class Environment:
    """Shared episode bookkeeping; subclasses implement the dynamics."""

    name = ""
    obs_dim = 0
    act_dim = 0
    state_dim = 0
    params_type: type = object

    def __init__(self, params=None, dt: float = 0.01, frame_skip: int = 1,
                 max_episode_steps: int = 200, seed: int | None = None):
        self.params = self.params_type() if params is None else params
        if not isinstance(self.params, self.params_type):
            raise TypeError(f"{type(self).__name__} needs {self.params_type.__name__}")
        if dt <= 0.0 or frame_skip < 1 or max_episode_steps < 1:
            raise ValueError("dt, frame_skip and max_episode_steps must be positive")
        self.dt = dt
        self.frame_skip = frame_skip
        self.max_episode_steps = max_episode_steps
        self._seed = seed
        self._rng = np.random.default_rng(seed)
        self.state = np.zeros(self.state_dim)
        self.steps = 0
        self.finished = True
        self.terminated = False

    def with_params(self, **overrides) -> Environment:
        """Fresh environment with some physical parameters replaced; ``self`` is untouched."""
        unknown = set(overrides) - {f.name for f in fields(self.params_type)}
        if unknown:
            raise ValueError(f"unknown parameters for {self.name}: {sorted(unknown)}")
        return type(self)(replace(self.params, **overrides), self.dt, self.frame_skip,
                          self.max_episode_steps, self._seed)

    @property
    def truncated(self) -> bool:
        """True once the time limit ended the episode (not a terminal state)."""
        return self.steps >= self.max_episode_steps and not self.terminated

    def reset(self, seed: int | None = None) -> np.ndarray:
        rng = self._rng if seed is None else np.random.default_rng(seed)
        self.state = self._initial_state(rng)
        self.steps = 0
        self.finished = False
        self.terminated = False
        return self.observe()

    def set_state(self, state) -> np.ndarray:
        """Start an episode from an explicit physical state."""
        self.state = np.array(state, dtype=np.float64).reshape(self.state_dim)
        self.steps = 0
        self.finished = False
        self.terminated = False
        return self.observe()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        """Advance one control step. ``done`` marks termination only, not truncation."""
        if self.finished:
            raise EpisodeFinishedError("episode is over; call reset() first")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.act_dim), -1.0, 1.0)
        reward = self._reward(a)
        for _ in range(self.frame_skip):
            self.state = self._integrate(self.state, a)
        self.steps += 1
        self.terminated = self._is_terminal()
        self.finished = self.terminated or self.steps >= self.max_episode_steps
        return self.observe(), float(reward), self.terminated

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def _initial_state(self, rng) -> np.ndarray:
        raise NotImplementedError

    def _integrate(self, state, action) -> np.ndarray:
        raise NotImplementedError

    def _reward(self, action) -> float:
        raise NotImplementedError

    def _is_terminal(self) -> bool:
        return False

    def __repr__(self) -> str:
        return f"{type(self).__name__}({asdict(self.params)})"


class Pendulum(Environment):
    """Torque-limited swing-up. ``theta`` is measured from upright (hanging is ``pi``).

    Dynamics ``theta'' = (g / l) sin(theta) + (torque - b theta') / (m l^2)``,
    integrated with kick-drift-kick steps of ``dt``. Observation
    ``(cos theta, sin theta, theta')``; reward
    ``-(wrap(theta)^2 + 0.1 theta'^2 + 0.001 torque^2)`` on the pre-step state.
    Initial angle uniform on ``(-pi, pi]``, initial velocity uniform on ``(-1, 1)``.
    """

    name = "pendulum"
    obs_dim = 3
    act_dim = 1
    state_dim = 2
    params_type = PendulumParams
    gravity = 10.0
    max_torque = 2.0
    max_speed = 8.0

    def __init__(self, params: PendulumParams | None = None, dt: float = 0.01, frame_skip: int = 5,
                 max_episode_steps: int = 200, seed: int | None = None):
        super().__init__(params, dt, frame_skip, max_episode_steps, seed)

    def angular_acceleration(self, theta, omega, torque):
        p = self.params
        return (self.gravity / p.length) * np.sin(theta) + (torque - p.damping_friction * omega) / (
            p.mass * p.length**2)

    def energy(self, state=None) -> float:
        theta, omega = self.state if state is None else state
        p = self.params
        return 0.5 * p.mass * p.length**2 * omega**2 + p.mass * self.gravity * p.length * math.cos(theta)

    def observe(self) -> np.ndarray:
        theta, omega = self.state
        return np.array([math.cos(theta), math.sin(theta), omega])

    def _initial_state(self, rng) -> np.ndarray:
        theta = -rng.uniform(-math.pi, math.pi)  # (-pi, pi]
        return np.array([theta, rng.uniform(-1.0, 1.0)])

    def _integrate(self, state, action) -> np.ndarray:
        torque = self.max_torque * action[0]
        theta, omega = state
        h = 0.5 * self.dt
        omega = omega + h * self.angular_acceleration(theta, omega, torque)
        theta = theta + self.dt * omega
        omega = omega + h * self.angular_acceleration(theta, omega, torque)
        return np.array([theta, min(max(omega, -self.max_speed), self.max_speed)])

    def _reward(self, action) -> float:
        theta, omega = self.state
        torque = self.max_torque * action[0]
        return -(float(wrap_angle(theta)) ** 2 + 0.1 * omega**2 + 0.001 * torque**2)


class CartPole(Environment):
    """Cart-pole balance with a continuous force and Coulomb friction on the track.

    State ``(x, x', theta, theta')``, ``theta`` from upright. Pole dynamics follow
    the classic rigid-pole model with half-length ``pole_length / 2``; the track
    applies ``track_friction * (M + m) g sign(x')`` against the motion. Semi-implicit
    Euler steps of ``dt``. Reward 1 per step; the episode terminates once
    ``|theta| > 0.21`` rad or ``|x| > 2.4`` m. Initial state uniform on ``(-0.05, 0.05)^4``.
    """

    name = "cartpole"
    obs_dim = 4
    act_dim = 1
    state_dim = 4
    params_type = CartPoleParams
    gravity = 9.8
    force_mag = 10.0
    theta_limit = 0.21
    x_limit = 2.4

    def __init__(self, params: CartPoleParams | None = None, dt: float = 0.01, frame_skip: int = 2,
                 max_episode_steps: int = 500, seed: int | None = None):
        super().__init__(params, dt, frame_skip, max_episode_steps, seed)

    def accelerations(self, state, force) -> tuple[float, float]:
        p = self.params
        x, x_dot, theta, theta_dot = state
        total = p.cart_mass + p.pole_mass
        half = 0.5 * p.pole_length
        sin, cos = math.sin(theta), math.cos(theta)
        friction = p.track_friction * total * self.gravity * np.sign(x_dot)
        temp = (force + p.pole_mass * half * theta_dot**2 * sin - friction) / total
        theta_acc = (self.gravity * sin - cos * temp) / (half * (4.0 / 3.0 - p.pole_mass * cos**2 / total))
        x_acc = temp - p.pole_mass * half * theta_acc * cos / total
        return float(x_acc), float(theta_acc)

    def observe(self) -> np.ndarray:
        return self.state.copy()

    def _initial_state(self, rng) -> np.ndarray:
        return rng.uniform(-0.05, 0.05, size=4)

    def _integrate(self, state, action) -> np.ndarray:
        x, x_dot, theta, theta_dot = state
        x_acc, theta_acc = self.accelerations(state, self.force_mag * action[0])
        x_dot = x_dot + self.dt * x_acc
        theta_dot = theta_dot + self.dt * theta_acc
        return np.array([x + self.dt * x_dot, x_dot, theta + self.dt * theta_dot, theta_dot])

    def _reward(self, action) -> float:
        return 1.0

    def _is_terminal(self) -> bool:
        x, _, theta, _ = self.state
        return bool(abs(theta) > self.theta_limit or abs(x) > self.x_limit)


ENVIRONMENTS = {"pendulum": Pendulum, "cartpole": CartPole}


@dataclass(frozen=True, eq=False)
class ObsNormalizer:
    """Frozen per-dimension affine map ``(o - mean) / std``."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64)
        std = np.array(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be vectors of equal length")
        if np.any(std <= 0.0) or not np.all(np.isfinite(mean)) or not np.all(np.isfinite(std)):
            raise ValueError("std must be positive and all moments finite")
        for name, arr in (("mean", mean), ("std", std)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls, dim: int) -> ObsNormalizer:
        return cls(np.zeros(dim), np.ones(dim))

    def normalize(self, obs):
        return (np.asarray(obs, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> ObsNormalizer:
        return cls(np.array(data["mean"]), np.array(data["std"]))


STD_FLOOR = 1e-6


def fit_normalizer(observations) -> ObsNormalizer:
    """Population mean and standard deviation per dimension, std floored at 1e-6."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 2:
        raise ValueError("need a (N, dim) stream with at least two observations")
    mean = obs.mean(axis=0)
    std = np.sqrt(((obs - mean) ** 2).mean(axis=0))
    return ObsNormalizer(mean, np.maximum(std, STD_FLOOR))


class NormalizedEnv:
    """Wrapper presenting normalised observations; dynamics and rewards unchanged."""

    def __init__(self, env: Environment, normalizer: ObsNormalizer):
        if normalizer.mean.shape != (env.obs_dim,):
            raise ValueError("normalizer dimension does not match the environment")
        self.env = env
        self.normalizer = normalizer

    def __getattr__(self, name):
        return getattr(self.env, name)

    def with_params(self, **overrides) -> NormalizedEnv:
        return NormalizedEnv(self.env.with_params(**overrides), self.normalizer)

    def reset(self, seed: int | None = None) -> np.ndarray:
        return self.normalizer.normalize(self.env.reset(seed))

    def set_state(self, state) -> np.ndarray:
        return self.normalizer.normalize(self.env.set_state(state))

    def step(self, action):
        obs, reward, done = self.env.step(action)
        return self.normalizer.normalize(obs), reward, done

    def __repr__(self) -> str:
        return f"NormalizedEnv({self.env!r})"


def make_env(name: str, normalizer: ObsNormalizer | None = None, seed: int | None = None, **params):
    """Environment by name with optional parameter overrides and normaliser."""
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    env = cls(cls.params_type(**params), seed=seed)
    return env if normalizer is None else NormalizedEnv(env, normalizer)


def base_env(env) -> Environment:
    return env.env if isinstance(env, NormalizedEnv) else env


def sample_observations(env, steps: int, seed: int) -> np.ndarray:
    """Raw observations from uniformly random actions, for fitting a normaliser."""
    env = base_env(env)
    if steps < 2:
        raise ValueError("need at least two steps")
    rng = np.random.default_rng(seed)
    obs = [env.reset(int(rng.integers(2**63 - 1)))]
    while len(obs) < steps:
        o, _, _ = env.step(rng.uniform(-1.0, 1.0, size=env.act_dim))
        obs.append(o)
        if env.finished and len(obs) < steps:
            obs.append(env.reset(int(rng.integers(2**63 - 1))))
    return np.array(obs)
