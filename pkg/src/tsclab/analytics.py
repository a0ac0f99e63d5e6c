"""Offline characterization of traffic flows and vehicle traces.

Covers the demand-side descriptors used to position scenarios relative to
each other: vehicles-per-lane density, a cumulative-normalization entropy
over turn probabilities that tells permutations apart, discounted route
direction features per vehicle, and a small power-iteration PCA for
projecting those features to three coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sim import LANES_PER_INTERSECTION

TURN_ONE_HOT = {
    "s": np.array([1.0, 0.0, 0.0]),   # straight
    "r": np.array([0.0, 1.0, 0.0]),   # right
    "l": np.array([0.0, 0.0, 1.0]),   # left
}


def network_lane_count(rows: int, cols: int) -> int:
    """All incoming lanes of all intersections (12 per intersection)."""
    return rows * cols * LANES_PER_INTERSECTION


def flow_density(n_vehicles: float, n_lanes: int) -> float:
    """Vehicles per lane per hour."""
    if n_lanes <= 0:
        raise ValueError(f"lane count must be positive, got {n_lanes}")
    return n_vehicles / n_lanes


def cnt_entropy(p) -> float:
    """Entropy of the cumulative-normalized turn distribution, in bits.

    q_i = (p_1 + ... + p_i) / (p_1 + p_2 + p_3); H = -sum q_i log2 q_i.
    The q_i do not form a probability distribution (q_3 = 1 by construction);
    the point of the transform is that reorderings of p change H.
    """
    p = [float(x) for x in p]
    if len(p) != 3 or any(x < 0 for x in p):
        raise ValueError("expected three nonnegative probabilities")
    total = sum(p)
    if total <= 0:
        raise ValueError("turn probabilities must not all be zero")
    h = 0.0
    acc = 0.0
    for x in p:
        acc += x
        q = acc / total
        if q > 0:
            h -= q * math.log2(q)
    return h


@dataclass(frozen=True)
class TravelFeature:
    """Discounted route-direction vector plus network entry time."""
    v_turn: np.ndarray
    t_start: float

    @property
    def v_travel(self) -> np.ndarray:
        return np.concatenate([self.v_turn, [self.t_start]])


def route_feature(turns, beta: float, t_start: float) -> TravelFeature:
    """v_turn = sum_i beta^i * onehot(turn_i); empty routes give zeros."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"turn discount must lie in (0,1], got {beta}")
    v = np.zeros(3)
    for i, sym in enumerate(turns):
        if sym not in TURN_ONE_HOT:
            raise ValueError(f"unknown turn symbol {sym!r} (expected one of s/r/l)")
        v += (beta ** i) * TURN_ONE_HOT[sym]
    return TravelFeature(v, float(t_start))


@dataclass(frozen=True)
class PcaResult:
    coords: np.ndarray            # (n, k_eff) projected coordinates
    explained: np.ndarray         # (k_eff,) share of total variance per component
    components: np.ndarray        # (k_eff, d) orthonormal rows
    eigenvalues: np.ndarray       # (k_eff,) non-increasing
    rank_deficient: bool


def pca_project(features, k: int = 3, tol: float = 1e-10,
                max_iter: int = 10_000, seed: int = 0) -> PcaResult:
    """Top-k PCA via power iteration with deflation.

    Features are mean-centered and the last column (entry time) is scaled to
    unit variance so the seconds axis does not drown the one-hot turn axes.
    Returns fewer than k components (flagged) when the data is rank deficient.
    """
    x = np.array([np.asarray(f, dtype=np.float64) for f in features])
    if x.ndim != 2 or x.shape[0] < k + 1:
        raise ValueError(f"need at least {k + 1} feature vectors, got {x.shape}")
    x = x - x.mean(axis=0)
    t_std = x[:, -1].std()
    if t_std > 0:
        x[:, -1] /= t_std

    cov = (x.T @ x) / (x.shape[0] - 1)
    total_var = np.trace(cov)
    floor = max(total_var, 1.0) * 1e-12
    rng = np.random.default_rng(seed)

    components, eigenvalues = [], []
    work = cov.copy()
    for _ in range(min(k, cov.shape[0])):
        v = rng.standard_normal(cov.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm <= floor:
                break
            w /= norm
            if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
                v = w
                break
            v = w
        lam = float(v @ work @ v)
        if lam <= floor:
            break
        components.append(v)
        eigenvalues.append(lam)
        work = work - lam * np.outer(v, v)

    comp = np.array(components) if components else np.zeros((0, cov.shape[0]))
    eig = np.array(eigenvalues)
    coords = x @ comp.T if len(components) else np.zeros((x.shape[0], 0))
    explained = eig / total_var if total_var > 0 else eig
    return PcaResult(coords, explained, comp, eig,
                     rank_deficient=len(components) < min(k, cov.shape[0]))


def trace_features(rows, beta: float) -> tuple[list[str], np.ndarray]:
    """Vehicle-trace rows (id, spawn, turns, exit) -> travel feature matrix."""
    ids, feats = [], []
    for vid, spawn, turns, _exit in rows:
        ids.append(str(vid))
        feats.append(route_feature(turns, beta, spawn).v_travel)
    return ids, np.array(feats) if feats else np.zeros((0, 4))
