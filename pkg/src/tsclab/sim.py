"""Queue-based micro-simulator of signalized grid road networks.

Model: vehicles enter at boundary approaches following per-entry exponential
inter-arrival clocks whose mean gap is phase-dependent, traverse links at
free-flow speed, and wait in FIFO lanes (one lane per approach x movement) at
each intersection.  A lane whose movement is green -- right turns always are --
discharges one vehicle every `saturation_headway` seconds.  Control happens at
a coarser decision interval: each call to :meth:`TrafficEngine.step` applies
one signal phase per intersection and advances ten one-second ticks.

All randomness is seeded: demand comes from a numpy generator keyed by the
engine seed, and every vehicle carries its own turn-decision stream derived
from (seed, vehicle id), so the demand realization does not depend on the
control policy.
"""

from __future__ import annotations

import csv
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .params import Hyper, DEFAULT_HYPER

DIRECTIONS = ("N", "E", "S", "W")
MOVEMENTS = ("left", "straight", "right")
LANES_PER_INTERSECTION = len(DIRECTIONS) * len(MOVEMENTS)
N_PHASES = 4
PHASE_NAMES = ("WE-straight", "NS-straight", "WE-left", "NS-left")
OBS_DIM = N_PHASES + LANES_PER_INTERSECTION

TURN_LETTERS = {"straight": "s", "right": "r", "left": "l"}

_OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}

# heading of travel for a vehicle that entered from a given side and turned
_OUT_DIR = {
    ("N", "straight"): "S", ("N", "left"): "E", ("N", "right"): "W",
    ("S", "straight"): "N", ("S", "left"): "W", ("S", "right"): "E",
    ("W", "straight"): "E", ("W", "left"): "N", ("W", "right"): "S",
    ("E", "straight"): "W", ("E", "left"): "S", ("E", "right"): "N",
}


def lane_index(side: str, movement: str) -> int:
    """Lane id within an intersection: approaches N,E,S,W x (left, straight, right)."""
    return DIRECTIONS.index(side) * 3 + MOVEMENTS.index(movement)


# green (side, movement) pairs per phase; right turns handled separately
PHASE_GREEN = (
    (("W", "straight"), ("E", "straight")),
    (("N", "straight"), ("S", "straight")),
    (("W", "left"), ("E", "left")),
    (("N", "left"), ("S", "left")),
)
# (lane, side, movement) triples served per phase, fixed iteration order
_SERVED = tuple(
    tuple((lane_index(s, m), s, m) for s, m in pairs) +
    tuple((lane_index(d, "right"), d, "right") for d in DIRECTIONS)
    for pairs in PHASE_GREEN
)


# -- network -------------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    """A boundary approach: vehicles enter intersection `intersection` from `side`."""
    index: int
    intersection: int
    side: str


@dataclass(frozen=True)
class Link:
    kind: str            # internal | entry | exit
    src: str
    dst: str
    tau: int


@dataclass(frozen=True)
class Intersection:
    id: int
    row: int
    col: int
    neighbors: dict     # side -> intersection id or None (off-grid)


@dataclass(frozen=True)
class RoadNetwork:
    rows: int
    cols: int
    tau_ff: int
    intersections: tuple
    links: tuple
    entries: tuple

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def neighbor_lists(self) -> list[list[int]]:
        """Existing neighbor ids per intersection, N,E,S,W order."""
        return [[nb for d in DIRECTIONS if (nb := it.neighbors[d]) is not None]
                for it in self.intersections]


def build_grid(rows: int, cols: int, tau_ff: int = 30) -> RoadNetwork:
    """Construct a rows x cols grid with one entry per boundary approach."""
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive, got {rows}x{cols}")
    if tau_ff <= 0:
        raise ValueError(f"free-flow travel time must be positive, got {tau_ff}")
    tau_ff = int(tau_ff)

    def node_id(r, c):
        return r * cols + c

    intersections = []
    for r in range(rows):
        for c in range(cols):
            neighbors = {
                "N": node_id(r - 1, c) if r > 0 else None,
                "E": node_id(r, c + 1) if c < cols - 1 else None,
                "S": node_id(r + 1, c) if r < rows - 1 else None,
                "W": node_id(r, c - 1) if c > 0 else None,
            }
            intersections.append(Intersection(node_id(r, c), r, c, neighbors))

    links = []
    for it in intersections:
        for d in DIRECTIONS:
            nb = it.neighbors[d]
            if nb is not None:
                links.append(Link("internal", f"i{it.id}", f"i{nb}", tau_ff))

    entries = []
    for c in range(cols):
        entries.append(Entry(len(entries), node_id(0, c), "N"))
    for c in range(cols):
        entries.append(Entry(len(entries), node_id(rows - 1, c), "S"))
    for r in range(rows):
        entries.append(Entry(len(entries), node_id(r, 0), "W"))
    for r in range(rows):
        entries.append(Entry(len(entries), node_id(r, cols - 1), "E"))

    for e in entries:
        links.append(Link("entry", f"b{e.index}", f"i{e.intersection}", tau_ff))
        links.append(Link("exit", f"i{e.intersection}", f"b{e.index}", tau_ff))

    return RoadNetwork(rows, cols, tau_ff, tuple(intersections), tuple(links), tuple(entries))


# -- traffic demand -------------------------------------------------------

@dataclass(frozen=True)
class FlowPhase:
    duration: float
    entry_interval: float


@dataclass(frozen=True)
class FlowSpec:
    """Time-phased demand: turn probabilities plus per-phase entry gaps."""
    name: str
    turn_probs: tuple      # (straight, right, left)
    phases: tuple          # of FlowPhase
    grid: tuple | None = None
    vehicles: int | None = None

    def validate(self, horizon: float | None = 3600.0) -> None:
        """Check structural invariants; the duration sum is checked against the
        episode horizon only when one is given (engines pass theirs)."""
        p = self.turn_probs
        if len(p) != 3 or any(x < 0 or x > 1 for x in p) or abs(sum(p) - 1.0) > 1e-9:
            raise ValueError(f"{self.name}: turn probabilities must be in [0,1] and sum to 1")
        if not self.phases:
            raise ValueError(f"{self.name}: at least one demand phase required")
        if any(ph.entry_interval <= 0 for ph in self.phases):
            raise ValueError(f"{self.name}: entry intervals must be positive")
        if horizon is not None:
            total = sum(ph.duration for ph in self.phases)
            if abs(total - horizon) > 1e-6:
                raise ValueError(f"{self.name}: phase durations sum to {total}, "
                                 f"expected {horizon}")

    def interval_at(self, t: float) -> float:
        acc = 0.0
        for ph in self.phases:
            acc += ph.duration
            if t < acc:
                return ph.entry_interval
        return self.phases[-1].entry_interval

    def boundaries(self) -> list[float]:
        acc, out = 0.0, []
        for ph in self.phases[:-1]:
            acc += ph.duration
            out.append(acc)
        return out


def expected_spawns(flow: FlowSpec, n_entries: int) -> float:
    """Closed-form mean of the spawn process: sum(duration/gap) per entry."""
    per_entry = sum(ph.duration / ph.entry_interval for ph in flow.phases
                    if np.isfinite(ph.entry_interval))
    return per_entry * n_entries


_FLOW_DIR = Path(__file__).parent / "data" / "flows"


def builtin_flow_names() -> list[str]:
    return sorted(p.stem for p in _FLOW_DIR.glob("*.yaml"))


def load_flow(name_or_path) -> FlowSpec:
    """Load a flow spec, either a builtin name (jn1..hz4) or a YAML path."""
    path = Path(name_or_path)
    if not path.suffix:
        path = _FLOW_DIR / f"{name_or_path}.yaml"
    if not path.exists():
        raise FileNotFoundError(f"no flow spec at {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    try:
        spec = FlowSpec(
            name=str(raw["name"]),
            turn_probs=tuple(float(x) for x in raw["turn_probs"]),
            phases=tuple(FlowPhase(float(d), float(g)) for d, g in raw["phases"]),
            grid=tuple(int(x) for x in raw["grid"]) if raw.get("grid") else None,
            vehicles=int(raw["vehicles"]) if raw.get("vehicles") is not None else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed flow spec ({exc})") from exc
    spec.validate(horizon=None)
    return spec


def save_flow(spec: FlowSpec, path) -> None:
    doc = {
        "name": spec.name,
        "turn_probs": [float(x) for x in spec.turn_probs],
        "phases": [[ph.duration, ph.entry_interval] for ph in spec.phases],
    }
    if spec.grid:
        doc["grid"] = list(spec.grid)
    if spec.vehicles is not None:
        doc["vehicles"] = spec.vehicles
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


class SpawnProcess:
    """Per-entry arrival clocks realizing a piecewise-constant Poisson process.

    Gaps are unit-rate exponentials stretched by the locally active entry
    interval, so the expected total count is exactly `expected_spawns`.
    """

    def __init__(self, flow: FlowSpec, n_entries: int, rng: np.random.Generator,
                 horizon: float = 3600.0):
        self.flow = flow
        self.rng = rng
        self.horizon = horizon
        self._boundaries = flow.boundaries()
        self.next_fire = [self._advance(0.0) for _ in range(n_entries)]

    def _advance(self, start: float) -> float:
        work = self.rng.exponential(1.0)
        t = start
        while True:
            gap = self.flow.interval_at(t)
            if not np.isfinite(gap):
                return float("inf")
            nxt = next((b for b in self._boundaries if b > t), float("inf"))
            span = (nxt - t) / gap          # work consumed up to the boundary
            if work <= span or nxt == float("inf"):
                return t + work * gap
            work -= span
            t = nxt

    def step(self, t: int) -> list[int]:
        """Entry indices firing in [t, t+1), in entry order; repeats allowed."""
        fired = []
        for e, when in enumerate(self.next_fire):
            while when < t + 1 and when < self.horizon:
                fired.append(e)
                when = self._advance(when)
            self.next_fire[e] = when
        return fired


def spawn_step(spawner: SpawnProcess, t: int) -> list[int]:
    """One tick of the arrival process (thin alias kept for symmetry)."""
    return spawner.step(t)


# -- vehicles and lanes ----------------------------------------------------

class Vehicle:
    __slots__ = ("id", "spawn_time", "turns", "exit_time", "_preset", "_rng", "_seed_key")

    def __init__(self, vid: int, spawn_time: int, seed_key: str, preset=None):
        self.id = vid
        self.spawn_time = spawn_time
        self.turns: list[str] = []
        self.exit_time: int | None = None
        self._preset = list(preset) if preset else None
        self._rng = None
        self._seed_key = seed_key

    @property
    def completed(self) -> bool:
        return self.exit_time is not None

    def next_turn(self, turn_probs) -> str:
        if self._preset:
            letter = self._preset.pop(0)
        else:
            if self._rng is None:
                self._rng = random.Random(self._seed_key)
            u = self._rng.random()
            p_s, p_r, _ = turn_probs
            letter = "s" if u < p_s else ("r" if u < p_s + p_r else "l")
        self.turns.append(letter)
        return {"s": "straight", "r": "right", "l": "left"}[letter]


class _Lane:
    __slots__ = ("queue", "overflow", "next_free")

    def __init__(self):
        self.queue: deque = deque()
        self.overflow: deque = deque()
        self.next_free = 0


@dataclass
class MetricsLedger:
    """Per-episode bookkeeping: reward traces, queue totals, travel times."""
    horizon: int
    rewards: list = field(default_factory=list)        # one (n,) array per decision step
    queue_totals: list = field(default_factory=list)
    completed_travel: list = field(default_factory=list)
    unfinished_spawn: list = field(default_factory=list)
    spawned: int = 0
    finished: bool = False

    def record_step(self, rewards: np.ndarray, queue_totals: np.ndarray) -> None:
        self.rewards.append(rewards)
        self.queue_totals.append(queue_totals)

    def finalize(self, vehicles, spawned: int) -> None:
        self.spawned = spawned
        self.completed_travel = [v.exit_time - v.spawn_time for v in vehicles if v.completed]
        self.unfinished_spawn = [v.spawn_time for v in vehicles if not v.completed]
        self.finished = True


@dataclass(frozen=True)
class EpisodeMetrics:
    m_tt: float
    m_th: int
    m_q: float
    travel_time_undefined: bool = False


def episode_metrics(ledger: MetricsLedger) -> EpisodeMetrics:
    """Travel time / throughput / queue metrics; unfinished vehicles count
    (horizon - spawn_time) so fast finishers do not bias m_tt downward."""
    if not ledger.finished:
        raise RuntimeError("episode metrics requested before the episode finished")
    m_th = len(ledger.completed_travel)
    if ledger.spawned == 0:
        m_tt, undefined = 0.0, True
    else:
        total = sum(ledger.completed_travel) + sum(ledger.horizon - s for s in ledger.unfinished_spawn)
        m_tt, undefined = total / ledger.spawned, False
    if ledger.queue_totals:
        m_q = float(np.mean(np.stack(ledger.queue_totals)))
    else:
        m_q = 0.0
    return EpisodeMetrics(m_tt, m_th, m_q, undefined)


class TrafficEngine:
    """Deterministic, seedable episode simulator over a grid network."""

    def __init__(self, net: RoadNetwork, flow: FlowSpec, seed: int,
                 hyper: Hyper = DEFAULT_HYPER, record_step_trace: bool = False):
        flow.validate(hyper.horizon)
        self.net = net
        self.flow = flow
        self.seed = seed
        self.hyper = hyper
        self.record_step_trace = record_step_trace
        self.steps_per_episode = hyper.horizon // hyper.decision_interval
        self.reset()

    def reset(self) -> np.ndarray:
        h = self.hyper
        self._spawner = SpawnProcess(self.flow, len(self.net.entries),
                                     np.random.default_rng(self.seed), h.horizon)
        self.lanes = [[_Lane() for _ in range(LANES_PER_INTERSECTION)]
                      for _ in range(self.net.n)]
        self.phases = np.zeros(self.net.n, dtype=np.int64)
        self._arrivals: dict[int, list] = {}
        self.vehicles: list[Vehicle] = []
        self.t = 0
        self.step_idx = 0
        self.done = False
        self.spawned = 0
        self.exited = 0
        self.on_link = 0
        self.ledger = MetricsLedger(horizon=h.horizon)
        self.step_trace: list[tuple] = []
        self._travel_sum = 0.0
        return self.observations()

    # -- state inspection --------------------------------------------------

    def queue_lengths(self) -> np.ndarray:
        return np.array([[len(lane.queue) for lane in lanes] for lanes in self.lanes],
                        dtype=np.int64)

    def observations(self) -> np.ndarray:
        obs = np.zeros((self.net.n, OBS_DIM))
        obs[np.arange(self.net.n), self.phases] = 1.0
        obs[:, N_PHASES:] = self.queue_lengths() * self.hyper.obs_scale
        return obs

    def conservation_counts(self) -> dict[str, int]:
        """Recount vehicles from the data structures (for invariant checks)."""
        queued = sum(len(l.queue) for lanes in self.lanes for l in lanes)
        in_flight = sum(len(v) for v in self._arrivals.values())
        overflow = sum(len(l.overflow) for lanes in self.lanes for l in lanes)
        exited = sum(1 for v in self.vehicles if v.completed)
        return {"spawned": len(self.vehicles), "queued": queued,
                "on_link": in_flight + overflow, "exited": exited}

    def running_mean_travel_time(self) -> float:
        return self._travel_sum / self.exited if self.exited else 0.0

    # -- vehicle injection (scenario setup and debugging) -------------------

    def inject_spawn(self, entry_index: int, turns: str) -> Vehicle:
        """Place a vehicle at a boundary entry now, with a preset turn string."""
        e = self.net.entries[entry_index]
        veh = self._new_vehicle(preset=list(turns))
        self._schedule(self.t + self.net.tau_ff, veh, e.intersection, e.side)
        self.on_link += 1
        return veh

    def inject_queued(self, intersection: int, side: str, movement: str) -> Vehicle:
        """Place a vehicle directly at the head of a lane queue."""
        veh = self._new_vehicle(preset=[])
        veh.turns.append(TURN_LETTERS[movement])
        self.lanes[intersection][lane_index(side, movement)].queue.append(veh)
        return veh

    def _new_vehicle(self, preset=None) -> Vehicle:
        vid = len(self.vehicles)
        veh = Vehicle(vid, self.t, f"{self.seed}:{vid}", preset=preset)
        self.vehicles.append(veh)
        self.spawned += 1
        return veh

    # -- dynamics ------------------------------------------------------------

    def _schedule(self, when: int, veh: Vehicle, intersection, side) -> None:
        self._arrivals.setdefault(when, []).append((veh, intersection, side))

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, bool]:
        """Apply one phase per intersection, advance the decision interval."""
        if self.done:
            raise RuntimeError("episode already finished")
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.net.n,):
            raise ValueError(f"expected {self.net.n} actions, got shape {actions.shape}")
        if actions.min() < 0 or actions.max() >= N_PHASES:
            raise ValueError(f"phase actions must lie in 0..{N_PHASES - 1}")
        self.phases = actions.copy()

        for _ in range(self.hyper.decision_interval):
            self._tick()

        queues = self.queue_lengths()
        totals = queues.sum(axis=1)
        rewards = -totals.astype(np.float64)
        self.ledger.record_step(rewards, totals)
        if self.record_step_trace:
            for i in range(self.net.n):
                self.step_trace.append((self.step_idx, i, int(self.phases[i]),
                                        float(rewards[i]), int(totals[i])))
        self.step_idx += 1
        if self.step_idx >= self.steps_per_episode:
            self.done = True
            self.ledger.finalize(self.vehicles, self.spawned)
        obs = self.observations()
        return obs, rewards, self.done

    def _tick(self) -> None:
        t = self.t
        tau = self.net.tau_ff
        cap = self.hyper.lane_capacity
        headway = self.hyper.saturation_headway

        for entry_idx in self._spawner.step(t):
            e = self.net.entries[entry_idx]
            veh = self._new_vehicle()
            self._schedule(t + tau, veh, e.intersection, e.side)
            self.on_link += 1

        for veh, inter, side in self._arrivals.pop(t, ()):
            if inter is None:
                veh.exit_time = t
                self.exited += 1
                self.on_link -= 1
                self._travel_sum += t - veh.spawn_time
                continue
            movement = veh.next_turn(self.flow.turn_probs)
            lane = self.lanes[inter][lane_index(side, movement)]
            if len(lane.queue) < cap:
                lane.queue.append(veh)
                self.on_link -= 1
            else:
                lane.overflow.append(veh)      # waits on the upstream link

        for i in range(self.net.n):
            lanes = self.lanes[i]
            neighbors = self.net.intersections[i].neighbors
            for lane_id, side, movement in _SERVED[self.phases[i]]:
                lane = lanes[lane_id]
                if not lane.queue or lane.next_free > t:
                    continue
                veh = lane.queue.popleft()
                lane.next_free = t + headway
                out_dir = _OUT_DIR[(side, movement)]
                nb = neighbors[out_dir]
                self._schedule(t + tau, veh, nb, _OPPOSITE[out_dir] if nb is not None else None)
                self.on_link += 1
                if lane.overflow and len(lane.queue) < cap:
                    lane.queue.append(lane.overflow.popleft())
                    self.on_link -= 1

        self.t += 1

    def metrics(self) -> EpisodeMetrics:
        return episode_metrics(self.ledger)


# -- trace files -----------------------------------------------------------

STEP_TRACE_COLUMNS = ("episode", "step", "intersection", "phase", "reward", "queue_total")
VEHICLE_TRACE_COLUMNS = ("vehicle_id", "spawn_time", "turns", "exit_time")


def write_step_trace(path, rows_by_episode) -> None:
    """rows_by_episode: iterable of (episode, engine.step_trace rows)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STEP_TRACE_COLUMNS)
        for episode, rows in rows_by_episode:
            for step, i, phase, reward, qtot in rows:
                writer.writerow([episode, step, i, phase, repr(reward), qtot])


def write_vehicle_trace(path, vehicles) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(VEHICLE_TRACE_COLUMNS)
        for v in vehicles:
            writer.writerow([v.id, v.spawn_time, "".join(v.turns),
                             v.exit_time if v.completed else ""])


def read_vehicle_trace(path) -> list[tuple[int, float, str, float | None]]:
    out = []
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != VEHICLE_TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected vehicle trace header {header}")
        for vid, spawn, turns, exit_time in reader:
            out.append((int(vid), float(spawn), turns,
                        float(exit_time) if exit_time else None))
    return out
