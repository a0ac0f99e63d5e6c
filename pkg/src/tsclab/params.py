"""Shared constants and tunables with their documented defaults.

Every value here can be overridden from a harness config file; the defaults
are what the test suite and the shipped experiment configs assume.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass(frozen=True)
class Hyper:
    # simulator
    decision_interval: int = 10     # seconds between signal decisions
    horizon: int = 3600             # episode length in seconds
    saturation_headway: int = 2     # seconds per discharged vehicle per lane
    lane_capacity: int = 50         # queued vehicles per lane; excess waits upstream
    obs_scale: float = 0.02         # queue counts scaled by 1/50 in observations
    link_travel_time: int = 30      # free-flow seconds per link

    # model widths
    d_model: int = 32
    hidden: int = 64

    # q-learning
    gamma: float = 0.8
    lr: float = 1e-3
    batch_size: int = 32
    buffer_capacity: int = 100_000
    warmup: int = 1_000
    sync_every: int = 100           # gradient steps between target syncs
    eps_start: float = 1.0
    eps_end: float = 0.05
    anneal_frac: float = 0.2        # fraction of total decision steps to anneal over
    reward_scale: float = 0.02      # rewards scaled by 1/50 inside TD targets

    # policy-reuse transfer
    window: int = 40                # decision steps between guide re-selections
    similarity_discount: float = 0.95
    guide_eps: float = 0.1          # probability of a random action under a guide

    # analytics
    turn_discount: float = 0.9      # per-turn discount in route features

    @property
    def steps_per_episode(self) -> int:
        return self.horizon // self.decision_interval

    def replace(self, **kwargs) -> "Hyper":
        return dataclasses.replace(self, **kwargs)


DEFAULT_HYPER = Hyper()
