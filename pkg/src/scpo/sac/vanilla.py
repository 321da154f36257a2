"""Plain soft actor-critic updates, written without any regulariser plumbing.

Serves as the reference that SC-SAC must reproduce exactly at ``epsilon = 0``.
It draws from ``agent.rng`` in the same order (critic noise, then actor noise)
and updates the same :class:`~scpo.sac.agent.AgentState` container.
"""

from __future__ import annotations

import numpy as np

from scpo.nn import backward, forward, policy_backward, policy_forward
from scpo.sac.agent import AgentState, UpdateStats
from scpo.sac.buffer import Batch


def _min_of_two(q1, q2, x):
    c1, c2 = forward(q1, x), forward(q2, x)
    v1, v2 = c1.output[:, 0], c2.output[:, 0]
    first = v1 <= v2
    return np.where(first, v1, v2), first, c1, c2


def sac_target(agent: AgentState, batch: Batch, noise: np.ndarray) -> np.ndarray:
    nxt = policy_forward(agent.policy, batch.s_next, noise)
    q_next, _, _, _ = _min_of_two(agent.q1_target, agent.q2_target,
                                  np.concatenate([batch.s_next, nxt.action], axis=1))
    return batch.r + agent.gamma * (1.0 - batch.done) * (q_next - agent.alpha * nxt.log_prob)


def sac_update(agent: AgentState, batch: Batch) -> UpdateStats:
    n = len(batch)
    y = sac_target(agent, batch, agent.rng.standard_normal((n, agent.act_dim)))

    x = np.concatenate([batch.s, batch.a], axis=1)
    critic_losses = []
    for net, opt in ((agent.q1, agent.opt_q1), (agent.q2, agent.opt_q2)):
        cache = forward(net, x)
        err = cache.output[:, 0] - y
        critic_losses.append(0.5 * float(np.mean(err * err)))
        opt.step(net.params, backward(net, cache, (err / n)[:, None])[0])

    noise = agent.rng.standard_normal((n, agent.act_dim))
    pi = policy_forward(agent.policy, batch.s, noise)
    q, first, c1, c2 = _min_of_two(agent.q1, agent.q2, np.concatenate([batch.s, pi.action], axis=1))
    ones = np.ones((n, 1))
    g = np.where(first[:, None], backward(agent.q1, c1, ones, False)[1], backward(agent.q2, c2, ones, False)[1])
    alpha = agent.alpha
    actor_loss = float(np.mean(alpha * pi.log_prob - q))
    d_params, _ = policy_backward(agent.policy, pi, -g[:, agent.obs_dim:] / n, np.full(n, alpha / n))
    agent.opt_pi.step(agent.policy.trunk.params, d_params)

    slack = float(np.mean(pi.log_prob + agent.entropy_target))
    agent.opt_alpha.step(agent.log_alpha, np.array([-alpha * slack]))

    tau = agent.config.tau
    for online, target in ((agent.q1, agent.q1_target), (agent.q2, agent.q2_target)):
        target.params[...] = tau * online.params + (1.0 - tau) * target.params
    agent.updates += 1
    return UpdateStats(critic_losses[0], critic_losses[1], actor_loss, -alpha * slack, 0.0)
