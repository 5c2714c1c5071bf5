"""Replay, losses and the value-based training loop."""

from tokenmoe.rlcore.agent import (
    AGENT_PRESETS,
    EVENTS_HEADER,
    METRICS_HEADER,
    PUBLISHED_DEFAULTS,
    Agent,
    AgentConfig,
    RunRecord,
    TrainSettings,
    agent_preset,
    epsilon_greedy,
    evaluate,
    linearly_decaying_epsilon,
    run_training,
    train_step,
)
from tokenmoe.rlcore.losses import c51_loss, c51_project, dqn_mse_loss, n_step_return, select_action_values
from tokenmoe.rlcore.replay import NStepAccumulator, ReplayBuffer, SumTree, Transition, per_sample, per_update

__all__ = [
    "AGENT_PRESETS",
    "EVENTS_HEADER",
    "METRICS_HEADER",
    "PUBLISHED_DEFAULTS",
    "Agent",
    "AgentConfig",
    "NStepAccumulator",
    "ReplayBuffer",
    "RunRecord",
    "SumTree",
    "TrainSettings",
    "Transition",
    "agent_preset",
    "c51_loss",
    "c51_project",
    "dqn_mse_loss",
    "epsilon_greedy",
    "evaluate",
    "linearly_decaying_epsilon",
    "n_step_return",
    "per_sample",
    "per_update",
    "run_training",
    "select_action_values",
    "train_step",
]
