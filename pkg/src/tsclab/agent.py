"""Model-based Q-learning agent for grid signal control.

One parameter set is shared by every intersection of a task.  The network has
three parts: an encoder (affine embedding + attention over the intersection's
own and its neighbors' features), a decoder that predicts the intersection's
next observation from the encoded features and the chosen phase, and a dueling
head that scores the four phases.  Training minimizes the sum of the decoder's
Euclidean prediction error and the squared TD error, with hard target-network
syncs every `sync_every` gradient steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Tensor, no_grad
from .params import Hyper, DEFAULT_HYPER
from .sim import OBS_DIM, N_PHASES, TrafficEngine, build_grid

N_ACTIONS = N_PHASES


class AgentNet:
    """The three blocks plus batched forward passes."""

    def __init__(self, rng: np.random.Generator, hyper: Hyper, with_decoder: bool = True):
        d, hid = hyper.d_model, hyper.hidden
        self.hyper = hyper
        self.embed = nn.Linear.create(rng, OBS_DIM, d)
        self.attention = nn.AttentionBlock.create(rng, d)
        self.decoder = (nn.MLPBlock.create(rng, [d + N_ACTIONS, hid, OBS_DIM])
                        if with_decoder else None)
        self.qhead = nn.DuelingHead.create(rng, d, hid, N_ACTIONS)

    @property
    def with_decoder(self) -> bool:
        return self.decoder is not None

    def parameters(self) -> dict[str, Tensor]:
        out = self.embed.parameters("encoder.embed")
        out.update(self.attention.parameters("encoder.attention"))
        if self.decoder is not None:
            out.update(self.decoder.parameters("decoder"))
        out.update(self.qhead.parameters("qnet"))
        return out

    def encoder_parameters(self) -> dict[str, Tensor]:
        out = self.embed.parameters("encoder.embed")
        out.update(self.attention.parameters("encoder.attention"))
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(state):
            missing = set(params) ^ set(state)
            raise ValueError(f"parameter names do not match: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def clone(self) -> "AgentNet":
        twin = AgentNet(np.random.default_rng(0), self.hyper, self.with_decoder)
        twin.load_state(self.state())
        return twin

    # -- forward passes ----------------------------------------------------

    def embed_only(self, obs: np.ndarray) -> Tensor:
        """First-stage feature map h = relu(o W_e + b_e) for stacked rows."""
        return nn.relu(self.embed(Tensor(np.atleast_2d(obs))))

    def encode_batch(self, obs: np.ndarray, neighbor_obs: list[np.ndarray]) -> Tensor:
        """Attention-fused features, one row per sample.

        obs: (n, OBS_DIM); neighbor_obs[i]: (k_i, OBS_DIM).  Each sample's key
        set is itself plus its neighbors, so isolated intersections still
        produce a well-defined output.
        """
        n = obs.shape[0]
        counts = np.array([nb.shape[0] for nb in neighbor_obs], dtype=np.intp)
        if counts.sum():
            stacked = np.concatenate([obs] + [nb for nb in neighbor_obs if nb.shape[0]])
        else:
            stacked = obs
        emb = self.embed_only(stacked)                      # (n + M, d)

        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]) + n
        outputs, order = [], np.empty(n, dtype=np.intp)
        pos = 0
        for k_count in np.unique(counts):
            sample_idx = np.flatnonzero(counts == k_count)
            key_idx = np.concatenate([
                np.concatenate([[i], offsets[i] + np.arange(k_count)])
                for i in sample_idx
            ]).astype(np.intp)
            queries = nn.gather_rows(emb, sample_idx)
            keys = nn.gather_rows(emb, key_idx)
            outputs.append(self.attention.attend_uniform(queries, keys, int(k_count) + 1))
            order[sample_idx] = pos + np.arange(len(sample_idx))
            pos += len(sample_idx)
        fused = outputs[0] if len(outputs) == 1 else nn.concat(outputs, axis=0)
        if not np.array_equal(order, np.arange(n)):
            fused = nn.gather_rows(fused, order)
        return fused

    def predict_batch(self, h: Tensor, actions: np.ndarray) -> Tensor:
        if self.decoder is None:
            raise RuntimeError("this agent variant has no decoder")
        onehot = np.zeros((h.data.shape[0], N_ACTIONS))
        onehot[np.arange(len(actions)), actions] = 1.0
        return self.decoder(nn.concat([h, Tensor(onehot)], axis=1))

    def q_batch(self, h: Tensor) -> Tensor:
        return self.qhead(h)


@dataclass
class Record:
    """One per-intersection transition in the replay buffer."""
    obs: np.ndarray
    neighbor_obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    next_neighbor_obs: np.ndarray


class ReplayBuffer:
    """Uniform ring buffer of per-intersection transitions."""

    def __init__(self, capacity: int = DEFAULT_HYPER.buffer_capacity,
                 warmup: int = DEFAULT_HYPER.warmup):
        self.capacity = capacity
        self.warmup = warmup
        self._data: list[Record] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._data)

    def add(self, record: Record) -> None:
        if len(self._data) < self.capacity:
            self._data.append(record)
        else:
            self._data[self._cursor] = record
            self._cursor = (self._cursor + 1) % self.capacity

    def add_step(self, obs: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
                 next_obs: np.ndarray, neighbor_ids: list[list[int]]) -> None:
        for i, ids in enumerate(neighbor_ids):
            self.add(Record(obs[i], obs[ids], int(actions[i]), float(rewards[i]),
                            next_obs[i], next_obs[ids]))

    @property
    def ready(self) -> bool:
        return len(self._data) >= self.warmup

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Record]:
        if not self.ready:
            raise RuntimeError(f"buffer below warmup size ({len(self._data)} < {self.warmup})")
        idx = rng.integers(len(self._data), size=batch_size)
        return [self._data[i] for i in idx]


class AgentModel:
    """Trainable agent: live network, frozen target copy, Adam state."""

    def __init__(self, seed_or_rng, hyper: Hyper = DEFAULT_HYPER, with_decoder: bool = True,
                 flow_name: str = "", grid: tuple[int, int] | None = None,
                 seed: int | None = None):
        rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
               else np.random.default_rng(seed_or_rng))
        self.hyper = hyper
        self.net = AgentNet(rng, hyper, with_decoder)
        self.target = self.net.clone()
        self.optimizer = nn.Adam(self.net.parameters().values(), lr=hyper.lr)
        self.grad_steps = 0
        self.flow_name = flow_name
        self.grid = grid
        self.seed = seed if seed is not None else (
            seed_or_rng if isinstance(seed_or_rng, int) else None)

    @property
    def gamma(self) -> float:
        return self.hyper.gamma

    @property
    def with_decoder(self) -> bool:
        return self.net.with_decoder

    def copy(self) -> "AgentModel":
        twin = AgentModel(0, self.hyper, self.with_decoder, self.flow_name, self.grid,
                          seed=self.seed)
        twin.net.load_state(self.net.state())
        twin.target.load_state(self.target.state())
        return twin

    def sync_target(self) -> None:
        self.target.load_state(self.net.state())

    # -- single-sample operations (the per-intersection contracts) ---------

    def encode(self, obs, neighbor_obs: list) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (OBS_DIM,):
            raise ValueError(f"expected observation of length {OBS_DIM}, got {obs.shape}")
        nb = (np.stack([np.asarray(o, dtype=np.float64) for o in neighbor_obs])
              if neighbor_obs else np.zeros((0, OBS_DIM)))
        if nb.shape[0] and nb.shape[1] != OBS_DIM:
            raise ValueError(f"neighbor observations must have length {OBS_DIM}")
        with no_grad():
            return self.net.encode_batch(obs[None, :], [nb]).data[0]

    def predict_next(self, h, action: int) -> np.ndarray:
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action must lie in 0..{N_ACTIONS - 1}, got {action}")
        h = np.asarray(h, dtype=np.float64)
        with no_grad():
            return self.net.predict_batch(Tensor(h[None, :]), np.array([action])).data[0]

    def q_values(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        with no_grad():
            return self.net.q_batch(Tensor(h[None, :])).data[0]

    def act(self, h, epsilon: float, rng: np.random.Generator) -> int:
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0,1], got {epsilon}")
        if rng.random() < epsilon:
            return int(rng.integers(N_ACTIONS))
        return int(np.argmax(self.q_values(h)))   # argmax breaks ties by lowest index

    # -- batched acting ------------------------------------------------------

    def greedy_joint(self, obs_all: np.ndarray, neighbor_ids: list[list[int]],
                     subset: np.ndarray | None = None) -> np.ndarray:
        idx = np.arange(obs_all.shape[0]) if subset is None else np.asarray(subset)
        with no_grad():
            h = self.net.encode_batch(obs_all[idx],
                                      [obs_all[neighbor_ids[i]] for i in idx])
            q = self.net.q_batch(h).data
        return np.argmax(q, axis=1)

    def act_joint(self, obs_all: np.ndarray, neighbor_ids: list[list[int]],
                  epsilon: float, rng: np.random.Generator) -> np.ndarray:
        actions = self.greedy_joint(obs_all, neighbor_ids)
        explore = rng.random(len(actions)) < epsilon
        if explore.any():
            actions[explore] = rng.integers(N_ACTIONS, size=int(explore.sum()))
        return actions

    # -- training --------------------------------------------------------------

    def compute_batch_losses(self, batch: list[Record]) -> tuple[Tensor, Tensor]:
        """Decoder loss (mean Euclidean error) and TD loss on one batch."""
        h = self.hyper
        obs = np.stack([r.obs for r in batch])
        next_obs = np.stack([r.next_obs for r in batch])
        actions = np.array([r.action for r in batch])
        rewards = np.array([r.reward for r in batch])
        nb = [r.neighbor_obs for r in batch]
        next_nb = [r.next_neighbor_obs for r in batch]

        with no_grad():
            h_next = self.target.encode_batch(next_obs, next_nb)
            q_next = self.target.q_batch(h_next).data
        y = rewards * h.reward_scale + self.gamma * q_next.max(axis=1)

        fused = self.net.encode_batch(obs, nb)
        q = self.net.q_batch(fused)
        onehot = np.zeros_like(q.data)
        onehot[np.arange(len(batch)), actions] = 1.0
        q_taken = nn.tensor_sum(nn.mul(q, Tensor(onehot)), axis=1)
        td = nn.sub(Tensor(y), q_taken)
        loss_q = nn.mul(td, td).mean()

        if self.with_decoder:
            pred = self.net.predict_batch(fused, actions)
            diff = nn.sub(pred, Tensor(next_obs))
            dist = nn.sqrt(nn.tensor_sum(nn.mul(diff, diff), axis=1))
            loss_d = dist.mean()
        else:
            loss_d = Tensor(0.0)
        return loss_d, loss_q

    def train_batch(self, batch: list[Record]) -> tuple[float, float]:
        loss_d, loss_q = self.compute_batch_losses(batch)
        loss = nn.add(loss_d, loss_q) if loss_d.requires_grad else loss_q
        nn.backward(loss)
        self.optimizer.step()
        self.grad_steps += 1
        return loss_d.item(), loss_q.item()

    # -- persistence --------------------------------------------------------

    def checkpoint_meta(self) -> dict[str, object]:
        return {
            "obs_dim": OBS_DIM,
            "n_actions": N_ACTIONS,
            "d_model": self.hyper.d_model,
            "hidden": self.hyper.hidden,
            "gamma": self.hyper.gamma,
            "flow": self.flow_name or "-",
            "grid": f"{self.grid[0]}x{self.grid[1]}" if self.grid else "-",
            "seed": self.seed if self.seed is not None else "-",
            "with_decoder": int(self.with_decoder),
        }

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.net.state(), self.checkpoint_meta())

    @classmethod
    def load(cls, path, hyper: Hyper = DEFAULT_HYPER) -> "AgentModel":
        tensors, meta = nn.load_checkpoint(path)
        if int(meta.get("obs_dim", OBS_DIM)) != OBS_DIM:
            raise CompatibilityError(
                f"{path}: checkpoint observation width {meta.get('obs_dim')} != {OBS_DIM}")
        hyper = hyper.replace(d_model=int(meta.get("d_model", hyper.d_model)),
                              hidden=int(meta.get("hidden", hyper.hidden)),
                              gamma=float(meta.get("gamma", hyper.gamma)))
        grid = None
        if meta.get("grid", "-") != "-":
            r, c = meta["grid"].split("x")
            grid = (int(r), int(c))
        seed = None if meta.get("seed", "-") == "-" else int(meta["seed"])
        model = cls(0, hyper, with_decoder=bool(int(meta.get("with_decoder", 1))),
                    flow_name=meta.get("flow", ""), grid=grid, seed=seed)
        try:
            model.net.load_state(tensors)
        except ValueError as exc:
            raise CompatibilityError(f"{path}: {exc}") from exc
        model.sync_target()
        return model


class CompatibilityError(ValueError):
    """Checkpoint does not match the runtime's observation/model dimensions."""


@dataclass
class EpisodeStats:
    episode: int
    m_tt: float
    m_th: int
    m_q: float
    mean_loss_d: float
    mean_loss_q: float


def run_training_episode(engine: TrafficEngine, model: AgentModel, buffer: ReplayBuffer,
                         neighbor_ids: list[list[int]], action_rng, replay_rng,
                         epsilon_fn, hyper: Hyper, train: bool = True) -> tuple[list, list]:
    """Roll one episode, storing transitions and training once per decision step."""
    obs = engine.reset()
    losses_d, losses_q = [], []
    for t in range(engine.steps_per_episode):
        actions = model.act_joint(obs, neighbor_ids, epsilon_fn(t), action_rng)
        next_obs, rewards, _ = engine.step(actions)
        buffer.add_step(obs, actions, rewards, next_obs, neighbor_ids)
        if train and buffer.ready:
            ld, lq = model.train_batch(buffer.sample(hyper.batch_size, replay_rng))
            losses_d.append(ld)
            losses_q.append(lq)
            if model.grad_steps % hyper.sync_every == 0:
                model.sync_target()
        obs = next_obs
    return losses_d, losses_q


def pretrain(grid: tuple[int, int], flow, episodes: int, seed: int,
             hyper: Hyper = DEFAULT_HYPER, with_decoder: bool = True,
             progress=None) -> tuple[AgentModel, list[EpisodeStats]]:
    """Train a fresh shared agent on one (grid, flow) task with eps-greedy
    exploration annealed linearly over the first `anneal_frac` of all steps."""
    ss = np.random.SeedSequence(seed)
    params_ss, actions_ss, replay_ss, env_ss = ss.spawn(4)
    net = build_grid(*grid, tau_ff=hyper.link_travel_time)
    neighbor_ids = net.neighbor_lists()

    model = AgentModel(np.random.default_rng(params_ss), hyper, with_decoder,
                       flow_name=flow.name, grid=grid, seed=seed)
    buffer = ReplayBuffer(hyper.buffer_capacity, hyper.warmup)
    action_rng = np.random.default_rng(actions_ss)
    replay_rng = np.random.default_rng(replay_ss)
    env_seed = int(env_ss.generate_state(1)[0])   # same demand every episode

    steps = hyper.steps_per_episode
    anneal_steps = max(1, int(episodes * steps * hyper.anneal_frac))
    stats: list[EpisodeStats] = []
    for ep in range(episodes):
        engine = TrafficEngine(net, flow, env_seed, hyper)
        base = ep * steps

        def epsilon(t, _base=base):
            frac = min(1.0, (_base + t) / anneal_steps)
            return hyper.eps_start + frac * (hyper.eps_end - hyper.eps_start)

        ld, lq = run_training_episode(engine, model, buffer, neighbor_ids,
                                      action_rng, replay_rng, epsilon, hyper)
        m = engine.metrics()
        stats.append(EpisodeStats(ep + 1, m.m_tt, m.m_th, m.m_q,
                                  float(np.mean(ld)) if ld else 0.0,
                                  float(np.mean(lq)) if lq else 0.0))
        if progress:
            progress(stats[-1])
    return model, stats
