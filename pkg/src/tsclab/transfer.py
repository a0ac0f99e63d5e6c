"""Similarity-weighted policy reuse from a pool of pre-trained agents.

A frozen pool of source agents (plus the evolving target agent) drives
exploration in a new task.  Every decision step, each pool member's dynamics
decoder predicts the next observation of every intersection; predictions and
ground truth are embedded with an average encoder (the elementwise parameter
mean of the source encoders) and their Euclidean distance is recorded.  Every
`window` steps each intersection re-samples its guide agent from a softmax
over discounted, negated distance sums, so the most predictive member guides
the most.  Only the target agent trains; sources stay bit-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .agent import AgentModel, EpisodeStats, ReplayBuffer
from .nn import no_grad
from .params import Hyper, DEFAULT_HYPER
from .sim import N_PHASES, TrafficEngine, build_grid


class AgentPool:
    """Frozen source agents plus (once training starts) the target agent."""

    def __init__(self, sources: list[AgentModel], target: AgentModel | None = None):
        if not sources:
            raise ValueError("agent pool requires at least one source agent")
        for s in sources:
            if not s.with_decoder:
                raise ValueError("pool sources need a dynamics decoder for similarity")
        self.sources = list(sources)
        self.target = target

    @property
    def k(self) -> int:
        return len(self.sources)

    @property
    def n_members(self) -> int:
        return self.k + (1 if self.target is not None else 0)

    def member(self, index: int) -> AgentModel:
        if index < self.k:
            return self.sources[index]
        if self.target is None:
            raise IndexError("pool has no target agent yet")
        return self.target

    def member_names(self) -> list[str]:
        names = [s.flow_name or f"source{i}" for i, s in enumerate(self.sources)]
        if self.target is not None:
            names.append("target")
        return names

    def source_checksums(self) -> list[str]:
        out = []
        for s in self.sources:
            digest = hashlib.sha256()
            state = s.net.state()
            for name in sorted(state):
                digest.update(name.encode())
                digest.update(state[name].tobytes())
            out.append(digest.hexdigest())
        return out

    @classmethod
    def from_manifest(cls, path, hyper: Hyper = DEFAULT_HYPER) -> "AgentPool":
        """Build a pool from a YAML manifest listing checkpoint paths + flows."""
        path = Path(path)
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        if not raw or "sources" not in raw or not raw["sources"]:
            raise ValueError(f"{path}: manifest must list at least one source")
        sources = []
        for item in raw["sources"]:
            ckpt = Path(item["checkpoint"])
            if not ckpt.is_absolute():
                ckpt = path.parent / ckpt
            model = AgentModel.load(ckpt, hyper)
            if item.get("flow"):
                model.flow_name = str(item["flow"])
            sources.append(model)
        return cls(sources)


def save_manifest(path, entries: list[tuple[str, str]]) -> None:
    """entries: (checkpoint path, flow name) pairs."""
    doc = {"sources": [{"checkpoint": str(c), "flow": f} for c, f in entries]}
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


class AverageEncoder:
    """Elementwise mean of the source encoders' parameters.

    Similarity embeddings use only the affine stage (not attention): the
    decoder predicts a single intersection's observation, so there are no
    trustworthy neighbor features to attend over.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params
        self._w = params["encoder.embed.weight"]
        self._b = params["encoder.embed.bias"]

    def embed(self, obs: np.ndarray) -> np.ndarray:
        return np.maximum(np.atleast_2d(obs) @ self._w + self._b, 0.0)


def average_encoder(pool: AgentPool) -> AverageEncoder:
    states = [s.net.state() for s in pool.sources]
    names = states[0].keys()
    averaged = {name: np.mean([st[name] for st in states], axis=0)
                for name in names if name.startswith("encoder.")}
    return AverageEncoder(averaged)


def step_distance(agent: AgentModel, avg: AverageEncoder, obs, neighbor_obs,
                  action: int, next_obs) -> float:
    """Euclidean gap between embedded predicted and true next observations."""
    h = agent.encode(obs, neighbor_obs)
    predicted = agent.predict_next(h, action)
    z_hat = avg.embed(predicted)[0]
    z = avg.embed(np.asarray(next_obs, dtype=np.float64))[0]
    return float(np.linalg.norm(z_hat - z))


def member_step_distances(member: AgentModel, avg: AverageEncoder, obs_all: np.ndarray,
                          neighbor_ids: list[list[int]], actions: np.ndarray,
                          next_obs_all: np.ndarray) -> np.ndarray:
    """Per-intersection distances for one pool member, batched."""
    with no_grad():
        h = member.net.encode_batch(obs_all, [obs_all[ids] for ids in neighbor_ids])
        predicted = member.net.predict_batch(h, actions).data
    z_hat = avg.embed(predicted)
    z = avg.embed(next_obs_all)
    return np.linalg.norm(z_hat - z, axis=1)


def temporal_weight(distances, lam: float) -> float:
    """Discounted, negated distance sum; the newest entry has exponent 0."""
    distances = list(distances)
    if not distances:
        raise ValueError("temporal weight requires at least one distance")
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"discount must lie in (0,1], got {lam}")
    ages = np.arange(len(distances) - 1, -1, -1, dtype=np.float64)
    return float(-(lam ** ages @ np.asarray(distances, dtype=np.float64)))


def guide_distribution(weights) -> np.ndarray:
    """Softmax over similarity weights, computed with max-subtraction."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or not np.all(np.isfinite(w)):
        raise ValueError("guide distribution requires finite weights")
    e = np.exp(w - w.max())
    return e / e.sum()


class SimilarityTracker:
    """Ring of the last `window` per-member, per-intersection distances."""

    def __init__(self, n_intersections: int, n_members: int, window: int):
        self.n = n_intersections
        self.n_members = n_members
        self.window = window
        self._ring: list[np.ndarray] = []

    def reset(self) -> None:
        self._ring.clear()

    def add(self, distances: np.ndarray) -> None:
        if distances.shape != (self.n_members, self.n):
            raise ValueError(f"expected distances ({self.n_members},{self.n}), "
                             f"got {distances.shape}")
        self._ring.append(distances)
        if len(self._ring) > self.window:
            self._ring.pop(0)

    def __len__(self) -> int:
        return len(self._ring)

    def weights(self, lam: float) -> np.ndarray:
        """(n_members, n) discounted weights over the stored window."""
        if not self._ring:
            raise ValueError("no distances recorded yet")
        stack = np.stack(self._ring)                      # (w, members, n)
        ages = np.arange(len(self._ring) - 1, -1, -1, dtype=np.float64)
        return -np.tensordot(lam ** ages, stack, axes=1)


def sample_guides(tracker: SimilarityTracker, n_sources: int, rng: np.random.Generator,
                  lam: float) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Per-intersection guide sampling.

    Before any distances exist (the first window of an episode) guides are
    drawn uniformly from the sources and the target is excluded.  Returns
    (guides, probabilities (n, members), weights or None).
    """
    n, members = tracker.n, tracker.n_members
    if len(tracker) == 0:
        probs = np.zeros((n, members))
        probs[:, :n_sources] = 1.0 / n_sources
        guides = rng.integers(n_sources, size=n)
        return guides, probs, None
    weights = tracker.weights(lam)                        # (members, n)
    shifted = weights - weights.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    probs = (e / e.sum(axis=0, keepdims=True)).T          # (n, members)
    u = rng.random(n)
    guides = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
    guides = np.minimum(guides, members - 1)    # cumsum rounding guard
    return guides.astype(np.int64), probs, weights


@dataclass
class GuideEvent:
    episode: int
    step: int
    intersection: int
    guide: int
    probability: float
    weights: tuple | None
    mtt_running: float


@dataclass
class TransferResult:
    target: AgentModel
    stats: list[EpisodeStats]
    guide_events: list[GuideEvent] = field(default_factory=list)
    init_source: int = 0


def transfer_train(pool: AgentPool, grid: tuple[int, int], flow, episodes: int,
                   seed: int, hyper: Hyper = DEFAULT_HYPER,
                   progress=None) -> TransferResult:
    """Adapt a target agent to (grid, flow) by guided exploration.

    The target starts as a copy of a uniformly random source, acts through
    per-intersection guide agents (with probability `guide_eps` of a random
    phase), and is the only member that trains.
    """
    ss = np.random.SeedSequence(seed)
    init_ss, guide_ss, mix_ss, replay_ss, env_ss = ss.spawn(5)
    init_rng = np.random.default_rng(init_ss)
    guide_rng = np.random.default_rng(guide_ss)
    mix_rng = np.random.default_rng(mix_ss)
    replay_rng = np.random.default_rng(replay_ss)
    env_seed = int(env_ss.generate_state(1)[0])

    net = build_grid(*grid, tau_ff=hyper.link_travel_time)
    neighbor_ids = net.neighbor_lists()
    n = net.n

    init_source = int(init_rng.integers(pool.k))
    target = pool.sources[init_source].copy()
    target.hyper = hyper
    target.flow_name = flow.name
    target.grid = grid
    target.seed = seed
    target.sync_target()
    pool.target = target

    avg = average_encoder(pool)
    tracker = SimilarityTracker(n, pool.k + 1, hyper.window)
    buffer = ReplayBuffer(hyper.buffer_capacity, hyper.warmup)

    stats: list[EpisodeStats] = []
    events: list[GuideEvent] = []
    lam = hyper.similarity_discount

    for ep in range(episodes):
        engine = TrafficEngine(net, flow, env_seed, hyper)
        obs = engine.reset()
        tracker.reset()
        guides = np.zeros(n, dtype=np.int64)
        losses_d, losses_q = [], []
        for t in range(engine.steps_per_episode):
            if t % hyper.window == 0:
                guides, probs, weights = sample_guides(tracker, pool.k, guide_rng, lam)
                mtt = engine.running_mean_travel_time()
                for i in range(n):
                    w = tuple(weights[:, i]) if weights is not None else None
                    events.append(GuideEvent(ep + 1, t, i, int(guides[i]),
                                             float(probs[i, guides[i]]), w, mtt))

            actions = np.zeros(n, dtype=np.int64)
            for g in np.unique(guides):
                idx = np.flatnonzero(guides == g)
                actions[idx] = pool.member(int(g)).greedy_joint(obs, neighbor_ids, idx)
            mix = mix_rng.random(n) < hyper.guide_eps
            if mix.any():
                actions[mix] = mix_rng.integers(N_PHASES, size=int(mix.sum()))

            next_obs, rewards, _ = engine.step(actions)

            dists = np.stack([
                member_step_distances(pool.member(j), avg, obs, neighbor_ids,
                                      actions, next_obs)
                for j in range(pool.k + 1)
            ])
            tracker.add(dists)

            buffer.add_step(obs, actions, rewards, next_obs, neighbor_ids)
            if buffer.ready:
                ld, lq = target.train_batch(buffer.sample(hyper.batch_size, replay_rng))
                losses_d.append(ld)
                losses_q.append(lq)
                if target.grad_steps % hyper.sync_every == 0:
                    target.sync_target()
            obs = next_obs

        m = engine.metrics()
        stats.append(EpisodeStats(ep + 1, m.m_tt, m.m_th, m.m_q,
                                  float(np.mean(losses_d)) if losses_d else 0.0,
                                  float(np.mean(losses_q)) if losses_q else 0.0))
        if progress:
            progress(stats[-1])

    return TransferResult(target, stats, events, init_source)
