"""SC-SAC agent state and its update rules.

The state-conservative variant replaces the critic value ``Q_min(s, a)`` by
``Q_min(s, a) - epsilon * ||grad_s Q_min(s, a)||_1``, a first-order lower bound
on the minimum of ``Q_min`` over an infinity-norm ball of radius ``epsilon``
around ``s``. It enters the bootstrap target of the critics and the actor
objective; ``epsilon = 0`` gives plain SAC.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from scpo.nn import (
    Adam,
    GaussianTanhPolicy,
    Mlp,
    backward,
    forward,
    input_hvp,
    load_checkpoint,
    policy_backward,
    policy_forward,
    save_checkpoint,
)
from scpo.sac.buffer import Batch

ABLATION_MODES = ("full", "sce_only", "sci_only")
GBR_GRAD_MODES = ("full", "truncated")


class DivergenceError(FloatingPointError):
    """A loss became NaN or infinite; the update was not applied."""

    def __init__(self, where: str, details: dict):
        super().__init__(f"non-finite {where}: " + ", ".join(f"{k}={v}" for k, v in details.items()))
        self.where = where
        self.details = details


@dataclass
class AgentConfig:
    epsilon: float = 0.005
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    hidden: tuple = (256, 256)
    activation: str = "relu"
    init_alpha: float = 1.0
    ablation: str = "full"
    gbr_grad: str = "full"

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.lr <= 0.0 or self.init_alpha <= 0.0:
            raise ValueError("lr and init_alpha must be positive")
        if self.ablation not in ABLATION_MODES:
            raise ValueError(f"ablation must be one of {ABLATION_MODES}")
        if self.gbr_grad not in GBR_GRAD_MODES:
            raise ValueError(f"gbr_grad must be one of {GBR_GRAD_MODES}")


class AgentState:
    """Critics, their targets, the policy, the temperature and all optimiser moments.

    ``rng`` is the policy-noise stream: every sampled action and every
    reparameterisation draw inside the updates comes from it.
    """

    def __init__(self, obs_dim: int, act_dim: int, config: AgentConfig, q1: Mlp, q2: Mlp,
                 policy: GaussianTanhPolicy, rng: np.random.Generator,
                 q1_target: Mlp | None = None, q2_target: Mlp | None = None,
                 log_alpha: float | None = None):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.config = config
        self.q1, self.q2, self.policy = q1, q2, policy
        self.q1_target = q1.copy() if q1_target is None else q1_target
        self.q2_target = q2.copy() if q2_target is None else q2_target
        init = np.log(config.init_alpha) if log_alpha is None else log_alpha
        self.log_alpha = np.array([init], dtype=np.float64)
        self.entropy_target = -float(act_dim)
        self.rng = rng
        self.opt_q1 = Adam(q1.n_params, config.lr)
        self.opt_q2 = Adam(q2.n_params, config.lr)
        self.opt_pi = Adam(policy.trunk.n_params, config.lr)
        self.opt_alpha = Adam(1, config.lr)
        self.updates = 0

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, config: AgentConfig | None = None,
               init_rng: np.random.Generator | None = None,
               policy_rng: np.random.Generator | None = None) -> AgentState:
        """Fresh agent; parameters come from ``init_rng`` in the order q1, q2, policy."""
        config = AgentConfig() if config is None else config
        init_rng = np.random.default_rng(0) if init_rng is None else init_rng
        sizes = [obs_dim + act_dim, *config.hidden, 1]
        q1 = Mlp.init(sizes, init_rng, config.activation)
        q2 = Mlp.init(sizes, init_rng, config.activation)
        policy = GaussianTanhPolicy.init(obs_dim, act_dim, config.hidden, init_rng, config.activation)
        rng = np.random.default_rng(1) if policy_rng is None else policy_rng
        return cls(obs_dim, act_dim, config, q1, q2, policy, rng)

    @property
    def epsilon(self) -> float:
        return self.config.epsilon

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    @property
    def gamma(self) -> float:
        return self.config.gamma

    def networks(self) -> dict[str, Mlp]:
        return {"q1": self.q1, "q2": self.q2, "q1_target": self.q1_target,
                "q2_target": self.q2_target, "policy": self.policy.trunk}

    def critic_gbr_active(self) -> bool:
        return self.config.ablation in ("full", "sce_only")

    def actor_gbr_active(self) -> bool:
        return self.config.ablation in ("full", "sci_only")


def ablation_mode(agent: AgentState, mode: str) -> None:
    """Choose where the regulariser applies: ``full``, ``sce_only`` (critic targets) or ``sci_only`` (actor)."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"mode must be one of {ABLATION_MODES}")
    if agent.updates:
        raise RuntimeError("set the ablation mode before training starts")
    agent.config.ablation = mode


def actor_objective_terms(agent: AgentState) -> tuple[str, ...]:
    """Summands of the per-sample actor loss as configured."""
    terms = ("entropy", "q_min")
    return terms + ("gbr",) if agent.actor_gbr_active() else terms


def critic_target_terms(agent: AgentState) -> tuple[str, ...]:
    terms = ("reward", "q_min", "entropy")
    return terms + ("gbr",) if agent.critic_gbr_active() else terms


# -- shared pieces ----------------------------------------------------------------

class CriticPair(NamedTuple):
    q_min: np.ndarray  # (B,)
    use_first: np.ndarray  # (B,) bool, critic 1 attains the minimum (ties included)
    caches: tuple


def critic_min(q1: Mlp, q2: Mlp, x: np.ndarray) -> CriticPair:
    c1, c2 = forward(q1, x), forward(q2, x)
    v1, v2 = c1.output[:, 0], c2.output[:, 0]
    use_first = v1 <= v2
    return CriticPair(np.where(use_first, v1, v2), use_first, (c1, c2))


def critic_min_input_grad(q1: Mlp, q2: Mlp, pair: CriticPair) -> np.ndarray:
    """Gradient of ``Q_min`` w.r.t. the concatenated (state, action) input, per row."""
    ones = np.ones((pair.q_min.shape[0], 1))
    _, g1 = backward(q1, pair.caches[0], ones, need_params=False)
    _, g2 = backward(q2, pair.caches[1], ones, need_params=False)
    return np.where(pair.use_first[:, None], g1, g2)


def gbr(value, grad_s, epsilon: float):
    """``value - epsilon * ||grad_s||_1`` row-wise: the linearised infimum over the infinity-norm ball."""
    if epsilon < 0.0:
        raise ValueError("epsilon must be non-negative")
    grad_s = np.asarray(grad_s, dtype=np.float64)
    return value - epsilon * np.abs(grad_s).sum(axis=-1)


def gbr_value(q1: Mlp, q2: Mlp, s, a, epsilon: float):
    """``Q_min(s, a) - epsilon * ||grad_s Q_min(s, a)||_1`` for one pair or a batch of rows."""
    if epsilon < 0.0:
        raise ValueError("epsilon must be non-negative")
    s, a = np.asarray(s, dtype=np.float64), np.asarray(a, dtype=np.float64)
    single = s.ndim == 1
    x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)
    pair = critic_min(q1, q2, x)
    g_s = critic_min_input_grad(q1, q2, pair)[:, : np.atleast_2d(s).shape[1]]
    out = gbr(pair.q_min, g_s, epsilon)
    return float(out[0]) if single else out


def soft_state_value(agent: AgentState, s: np.ndarray, noise: np.ndarray):
    """``U(s) = mean_k Q_min(s, f(noise_k; s))`` and its total state gradient.

    ``s`` is ``(N, obs_dim)`` and ``noise`` ``(K, act_dim)``; the same draws are
    used for every state. The gradient includes the path through the policy.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    n, k = s.shape[0], noise.shape[0]
    rows = np.repeat(s, k, axis=0)
    sample = policy_forward(agent.policy, rows, np.tile(noise, (n, 1)))
    pair = critic_min(agent.q1, agent.q2, np.concatenate([rows, sample.action], axis=1))
    g = critic_min_input_grad(agent.q1, agent.q2, pair)
    g_s, g_a = g[:, : agent.obs_dim], g[:, agent.obs_dim:]
    _, through_policy = policy_backward(agent.policy, sample, g_a, np.zeros(n * k), need_params=False)
    total = g_s + through_policy
    return pair.q_min.reshape(n, k).mean(axis=1), total.reshape(n, k, -1).mean(axis=1)


def gbr_state_value(agent: AgentState, s: np.ndarray, noise: np.ndarray, epsilon: float) -> np.ndarray:
    """First-order worst case of ``U`` over the infinity-norm ball: ``U - epsilon ||grad U||_1``."""
    u, grad = soft_state_value(agent, s, noise)
    return gbr(u, grad, epsilon)


def _check_finite(where: str, **values) -> None:
    bad = {k: v for k, v in values.items() if not np.all(np.isfinite(v))}
    if bad:
        raise DivergenceError(where, {k: np.asarray(v).ravel()[:4].tolist() for k, v in bad.items()})


# -- updates ----------------------------------------------------------------------

class CriticTarget(NamedTuple):
    y: np.ndarray
    gbr: np.ndarray | None  # epsilon * ||grad||_1 per row, None when not applied
    q_min: np.ndarray


def critic_target(agent: AgentState, batch: Batch, noise: np.ndarray) -> CriticTarget:
    """Bootstrap target from the target critics; ``noise`` reparameterises ``a'``."""
    sample = policy_forward(agent.policy, batch.s_next, noise)
    x = np.concatenate([batch.s_next, sample.action], axis=1)
    pair = critic_min(agent.q1_target, agent.q2_target, x)
    value = pair.q_min
    gbr = None
    if agent.critic_gbr_active():
        g_s = critic_min_input_grad(agent.q1_target, agent.q2_target, pair)[:, : agent.obs_dim]
        gbr = agent.epsilon * np.abs(g_s).sum(axis=1)
        value = value - gbr
    y = batch.r + agent.gamma * (1.0 - batch.done) * (value - agent.alpha * sample.log_prob)
    return CriticTarget(y, gbr, pair.q_min)


class CriticLosses(NamedTuple):
    loss1: float
    loss2: float
    gbr_fraction: float


def _gbr_fraction(gbr, q):
    if gbr is None:
        return 0.0
    return float(gbr.mean() / max(float(np.abs(q).mean()), 1e-12))


def regress_critics(agent: AgentState, batch: Batch, y: np.ndarray) -> tuple[float, float]:
    """One Adam step on ``mean(0.5 (Q_i(s, a) - y)^2)`` for both critics; ``y`` is a constant."""
    x = np.concatenate([batch.s, batch.a], axis=1)
    n = x.shape[0]
    losses, grads = [], []
    for net in (agent.q1, agent.q2):
        cache = forward(net, x)
        err = cache.output[:, 0] - y
        losses.append(0.5 * float(np.mean(err * err)))
        grads.append(backward(net, cache, (err / n)[:, None])[0])
    _check_finite("critic loss", loss1=losses[0], loss2=losses[1], target=y)
    agent.opt_q1.step(agent.q1.params, grads[0])
    agent.opt_q2.step(agent.q2.params, grads[1])
    return losses[0], losses[1]


def critic_update(agent: AgentState, batch: Batch) -> CriticLosses:
    if len(batch) == 0:
        raise ValueError("batch must not be empty")
    noise = agent.rng.standard_normal((len(batch), agent.act_dim))
    target = critic_target(agent, batch, noise)
    loss1, loss2 = regress_critics(agent, batch, target.y)
    return CriticLosses(loss1, loss2, _gbr_fraction(target.gbr, target.q_min))


class ActorStats(NamedTuple):
    loss: float
    log_prob: np.ndarray
    gbr_fraction: float


def actor_gradient(agent: AgentState, states: np.ndarray, noise: np.ndarray):
    """Loss ``mean(alpha log pi - Q_min + epsilon ||grad_s Q_min||_1)`` and its policy gradient.

    Returns ``(stats, d_params)``. With ``gbr_grad="truncated"`` the regulariser
    contributes to the loss value but not to the gradient.
    """
    n = states.shape[0]
    sample = policy_forward(agent.policy, states, noise)
    x = np.concatenate([states, sample.action], axis=1)
    pair = critic_min(agent.q1, agent.q2, x)
    g = critic_min_input_grad(agent.q1, agent.q2, pair)
    alpha = agent.alpha
    per_sample = alpha * sample.log_prob - pair.q_min
    d_action = -g[:, agent.obs_dim:]
    gbr = None
    if "gbr" in actor_objective_terms(agent):
        g_s = g[:, : agent.obs_dim]
        gbr = agent.epsilon * np.abs(g_s).sum(axis=1)
        per_sample = per_sample + gbr
        if agent.config.gbr_grad == "full":
            # d/da of ||grad_s Q||_1 = mixed second derivative along sign(grad_s Q)
            tangent = np.concatenate([np.sign(g_s), np.zeros((n, agent.act_dim))], axis=1)
            ones = np.ones((n, 1))
            h1 = input_hvp(agent.q1, pair.caches[0], ones, tangent)
            h2 = input_hvp(agent.q2, pair.caches[1], ones, tangent)
            mixed = np.where(pair.use_first[:, None], h1, h2)[:, agent.obs_dim:]
            d_action = d_action + agent.epsilon * mixed
    loss = float(np.mean(per_sample))
    d_params, _ = policy_backward(agent.policy, sample, d_action / n, np.full(n, alpha / n))
    return ActorStats(loss, sample.log_prob, _gbr_fraction(gbr, pair.q_min)), d_params


def actor_update(agent: AgentState, batch: Batch) -> ActorStats:
    """One Adam step of the policy on :func:`actor_gradient` with fresh noise."""
    if len(batch) == 0:
        raise ValueError("batch must not be empty")
    noise = agent.rng.standard_normal((len(batch), agent.act_dim))
    stats, d_params = actor_gradient(agent, batch.s, noise)
    _check_finite("actor loss", loss=stats.loss, gradient=d_params)
    agent.opt_pi.step(agent.policy.trunk.params, d_params)
    return stats


def alpha_update(agent: AgentState, batch: Batch, log_prob: np.ndarray | None = None) -> float:
    """One step on ``J = -alpha * mean(log pi + H)`` through ``log_alpha``.

    ``log_prob`` defaults to a fresh reparameterised draw on ``batch.s``; the
    training loop passes the draw from the actor step instead.
    """
    if log_prob is None:
        if len(batch) == 0:
            raise ValueError("batch must not be empty")
        noise = agent.rng.standard_normal((len(batch), agent.act_dim))
        log_prob = policy_forward(agent.policy, batch.s, noise).log_prob
    alpha = agent.alpha
    slack = float(np.mean(log_prob + agent.entropy_target))
    loss = -alpha * slack
    agent.opt_alpha.step(agent.log_alpha, np.array([-alpha * slack]))
    return loss


def polyak_update(agent: AgentState, tau: float | None = None) -> None:
    tau = agent.config.tau if tau is None else tau
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for online, target in ((agent.q1, agent.q1_target), (agent.q2, agent.q2_target)):
        target.params[...] = tau * online.params + (1.0 - tau) * target.params


class UpdateStats(NamedTuple):
    loss_q1: float
    loss_q2: float
    loss_actor: float
    loss_alpha: float
    gbr_fraction: float


def sc_sac_update(agent: AgentState, batch: Batch) -> UpdateStats:
    """Critic, actor, temperature and target steps on one minibatch."""
    critic = critic_update(agent, batch)
    actor = actor_update(agent, batch)
    loss_alpha = alpha_update(agent, batch, actor.log_prob)
    polyak_update(agent)
    agent.updates += 1
    fraction = actor.gbr_fraction if agent.actor_gbr_active() else critic.gbr_fraction
    return UpdateStats(critic.loss1, critic.loss2, actor.loss, loss_alpha, fraction)


# -- persistence ------------------------------------------------------------------

_OPTIMISERS = ("opt_q1", "opt_q2", "opt_pi", "opt_alpha")


def save_agent(path, agent: AgentState, manifest: dict | None = None):
    arrays = {"log_alpha": agent.log_alpha}
    for name in _OPTIMISERS:
        st = getattr(agent, name).state()
        arrays[f"{name}/m"], arrays[f"{name}/v"], arrays[f"{name}/t"] = st["m"], st["v"], np.array(st["t"])
    meta = {
        "config": asdict(agent.config),
        "obs_dim": agent.obs_dim,
        "act_dim": agent.act_dim,
        "updates": agent.updates,
        "rng_state": json.loads(json.dumps(agent.rng.bit_generator.state)),
        "manifest": manifest or {},
    }
    return save_checkpoint(path, agent.networks(), arrays, meta)


def load_agent(path) -> tuple[AgentState, dict]:
    """Restore an agent, including optimiser moments and the policy-noise stream."""
    nets, arrays, meta = load_checkpoint(path)
    config = AgentConfig(**meta["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    agent = AgentState(meta["obs_dim"], meta["act_dim"], config, nets["q1"], nets["q2"],
                       GaussianTanhPolicy(nets["policy"]), rng, nets["q1_target"], nets["q2_target"],
                       float(arrays["log_alpha"][0]))
    for name in _OPTIMISERS:
        getattr(agent, name).load_state({"m": arrays[f"{name}/m"], "v": arrays[f"{name}/v"],
                                         "t": int(arrays[f"{name}/t"])})
    agent.updates = meta["updates"]
    return agent, meta["manifest"]
