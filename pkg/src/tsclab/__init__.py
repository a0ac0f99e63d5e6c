"""Desk-scale traffic-signal-control lab.

A self-contained grid micro-simulator, model-based Q-learning agents that
jointly learn a control policy and a dynamics model, similarity-weighted
policy reuse from a pool of pre-trained agents, and an experiment harness.
"""

from .params import Hyper, DEFAULT_HYPER
from .sim import (FlowSpec, RoadNetwork, TrafficEngine, build_grid,
                  episode_metrics, expected_spawns, load_flow)
from .agent import AgentModel, ReplayBuffer, pretrain
from .transfer import (AgentPool, average_encoder, guide_distribution,
                       step_distance, temporal_weight, transfer_train)

__version__ = "0.1.0"

__all__ = [
    "Hyper", "DEFAULT_HYPER",
    "FlowSpec", "RoadNetwork", "TrafficEngine", "build_grid",
    "episode_metrics", "expected_spawns", "load_flow",
    "AgentModel", "ReplayBuffer", "pretrain",
    "AgentPool", "average_encoder", "guide_distribution",
    "step_distance", "temporal_weight", "transfer_train",
    "__version__",
]
