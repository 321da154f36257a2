"""State-conservative soft actor-critic."""

from scpo.sac.agent import (
    ABLATION_MODES,
    AgentConfig,
    AgentState,
    DivergenceError,
    ablation_mode,
    actor_gradient,
    actor_update,
    alpha_update,
    critic_target,
    critic_update,
    gbr,
    gbr_state_value,
    gbr_value,
    load_agent,
    polyak_update,
    save_agent,
    sc_sac_update,
    soft_state_value,
)
from scpo.sac.buffer import Batch, ReplayBuffer, Transition
from scpo.sac.train import (
    Streams,
    TrainConfig,
    TrainingLog,
    evaluate_policy,
    load_policies,
    make_streams,
    run_training,
    save_policies,
    train,
)
from scpo.sac.vanilla import sac_update

__all__ = [
    "ABLATION_MODES",
    "AgentConfig",
    "AgentState",
    "Batch",
    "DivergenceError",
    "ReplayBuffer",
    "Streams",
    "TrainConfig",
    "TrainingLog",
    "Transition",
    "ablation_mode",
    "actor_gradient",
    "actor_update",
    "alpha_update",
    "critic_target",
    "critic_update",
    "evaluate_policy",
    "gbr",
    "gbr_state_value",
    "gbr_value",
    "load_agent",
    "load_policies",
    "make_streams",
    "polyak_update",
    "run_training",
    "sac_update",
    "save_agent",
    "save_policies",
    "sc_sac_update",
    "soft_state_value",
    "train",
]
