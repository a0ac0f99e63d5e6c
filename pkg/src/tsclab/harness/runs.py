"""Experiment drivers: pretraining, transfer, the decoder ablation, analysis.

Each driver is pure function-of-config: identical config and seeds give
byte-identical logs and checkpoints.  Outputs land under the config's
out_dir: checkpoints/, logs/, summary.csv and an SVG learning-curve figure.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import analytics
from ..agent import AgentModel, pretrain
from ..params import Hyper
from ..sim import (TrafficEngine, build_grid, expected_spawns, load_flow,
                   read_vehicle_trace, write_step_trace, write_vehicle_trace)
from ..transfer import AgentPool, transfer_train
from . import report
from .config import ConfigError, ExperimentConfig


@dataclass(frozen=True)
class RunRecord:
    """Learning-efficiency view of one run's travel-time series."""
    m_tt_series: tuple
    ar: float     # trapezoidal area under the per-episode travel-time curve
    pe: float     # travel time after three training episodes


def compute_ar_pe(series) -> tuple[float, float]:
    series = np.asarray([float(x) for x in series])
    if len(series) < 3:
        raise ValueError(f"need at least 3 episodes for ar/pe, got {len(series)}")
    ar = float(((series[:-1] + series[1:]) / 2.0).sum())   # trapezoid over episode index
    return ar, float(series[2])


def make_record(series) -> RunRecord:
    ar, pe = compute_ar_pe(series)
    return RunRecord(tuple(series), ar, pe)


@dataclass
class RunOutput:
    flow: str
    method: str
    seed: int
    stats: list
    record: RunRecord | None
    checkpoint: Path | None = None
    guide_log: Path | None = None


def _summary_row(out: RunOutput):
    last = out.stats[-1]
    rec = out.record
    return (out.flow, out.method, out.seed, last.m_tt, last.m_th, last.m_q,
            rec.ar if rec else None, rec.pe if rec else None)


def _greedy_rollout_traces(cfg: ExperimentConfig, model: AgentModel, seed: int, tag: str):
    """One greedy evaluation episode with step + vehicle traces on disk."""
    net = build_grid(*cfg.grid, tau_ff=cfg.hyper.link_travel_time)
    flow = load_flow(cfg.flow)
    engine = TrafficEngine(net, flow, seed, cfg.hyper, record_step_trace=True)
    neighbor_ids = net.neighbor_lists()
    obs = engine.reset()
    done = False
    while not done:
        obs, _, done = engine.step(model.greedy_joint(obs, neighbor_ids))
    trace_dir = cfg.out_dir / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    write_step_trace(trace_dir / f"{tag}_steps.csv", [(1, engine.step_trace)])
    write_vehicle_trace(trace_dir / f"{tag}_vehicles.csv", engine.vehicles)


def _finish(cfg: ExperimentConfig, outputs: list[RunOutput], curve_tag: str) -> None:
    report.write_summary(cfg.out_dir / "summary.csv", [_summary_row(o) for o in outputs])
    curves = {f"{o.method} seed {o.seed}": [s.m_tt for s in o.stats]
              for o in outputs if o.stats}
    if curves:
        report.learning_curve_figure(cfg.out_dir / f"{curve_tag}_curves.svg", curves)


def run_pretrain(cfg: ExperimentConfig, with_decoder: bool = True,
                 method: str = "pretrain") -> list[RunOutput]:
    flow = load_flow(cfg.flow)
    ckpt_dir = cfg.out_dir / "checkpoints"
    log_dir = cfg.out_dir / "logs"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_dir.mkdir(parents=True, exist_ok=True)

    outputs = []
    for seed in cfg.seeds:
        model, stats = pretrain(cfg.grid, flow, cfg.episodes, seed, cfg.hyper,
                                with_decoder=with_decoder)
        ckpt = ckpt_dir / f"{method}_{flow.name}_s{seed}.ckpt"
        model.save(ckpt)
        report.write_training_log(log_dir / f"{method}_{flow.name}_s{seed}.csv", stats)
        record = make_record([s.m_tt for s in stats]) if len(stats) >= 3 else None
        outputs.append(RunOutput(flow.name, method, seed, stats, record, ckpt))
        if cfg.trace:
            _greedy_rollout_traces(cfg, model, seed, f"{method}_{flow.name}_s{seed}")
    if method == "pretrain":
        _finish(cfg, outputs, f"pretrain_{flow.name}")
    return outputs


def run_transfer(cfg: ExperimentConfig) -> list[RunOutput]:
    flow = load_flow(cfg.flow)
    if cfg.pool is None:
        raise ConfigError("transfer mode requires a pool manifest")
    pool = AgentPool.from_manifest(cfg.pool, cfg.hyper)
    ckpt_dir = cfg.out_dir / "checkpoints"
    log_dir = cfg.out_dir / "logs"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_dir.mkdir(parents=True, exist_ok=True)

    outputs = []
    for seed in cfg.seeds:
        result = transfer_train(pool, cfg.grid, flow, cfg.episodes, seed, cfg.hyper)
        ckpt = ckpt_dir / f"transfer_{flow.name}_s{seed}.ckpt"
        result.target.save(ckpt)
        report.write_training_log(log_dir / f"transfer_{flow.name}_s{seed}.csv", result.stats)
        guide_log = log_dir / f"guides_{flow.name}_s{seed}.csv"
        report.write_guide_log(guide_log, result.guide_events)
        record = make_record([s.m_tt for s in result.stats]) if len(result.stats) >= 3 else None
        outputs.append(RunOutput(flow.name, "transfer", seed, result.stats, record,
                                 ckpt, guide_log))
        if cfg.trace:
            _greedy_rollout_traces(cfg, result.target, seed, f"transfer_{flow.name}_s{seed}")
    _finish(cfg, outputs, f"transfer_{flow.name}")
    return outputs


def run_ablation(cfg: ExperimentConfig) -> dict[str, list[RunOutput]]:
    """Paired runs with and without the dynamics decoder (same seeds/schedules)."""
    variants = ("edq", "eq") if cfg.variant == "both" else (cfg.variant,)
    results: dict[str, list[RunOutput]] = {}
    for variant in variants:
        results[variant] = run_pretrain(cfg, with_decoder=(variant == "edq"),
                                        method=f"ablation-{variant}")
    outputs = [o for outs in results.values() for o in outs]
    _finish(cfg, outputs, f"ablation_{load_flow(cfg.flow).name}")
    return results


def ablation_gap(results: dict[str, list]) -> float:
    """Relative gap of seed-mean final-5-episode travel time, EDQ vs EQ."""
    def tail_mean(outs):
        return float(np.mean([np.mean([s.m_tt for s in o.stats[-5:]]) for o in outs]))

    edq, eq = tail_mean(results["edq"]), tail_mean(results["eq"])
    return abs(edq - eq) / eq


def run_analyze(flows_dir, out_dir, grid=None, seed: int = 0,
                hyper: Hyper = Hyper()) -> list[tuple]:
    """Characterize every flow spec in a directory and project its traffic.

    For each flow: density and turn entropy go to analytics.csv; one seeded
    episode under a fixed cyclic signal policy produces a vehicle trace whose
    route features feed a pooled 3-component PCA (pca.csv + scatter SVG).
    """
    flows_dir, out_dir = Path(flows_dir), Path(out_dir)
    paths = sorted(flows_dir.glob("*.yaml"))
    if not paths:
        raise ConfigError(f"no flow specs (*.yaml) found in {flows_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    analytics_rows = []
    ids, feats, labels = [], [], []
    for path in paths:
        spec = load_flow(path)
        flow_grid = grid or spec.grid
        if flow_grid is None:
            raise ConfigError(f"{spec.name}: flow spec has no grid; pass --grid")
        net = build_grid(*flow_grid, tau_ff=hyper.link_travel_time)
        n_veh = spec.vehicles if spec.vehicles is not None else \
            expected_spawns(spec, len(net.entries))
        density = analytics.flow_density(n_veh, analytics.network_lane_count(*flow_grid))
        entropy = analytics.cnt_entropy(spec.turn_probs)
        analytics_rows.append((spec.name, float(density), float(entropy)))

        engine = TrafficEngine(net, spec, seed, hyper)
        engine.reset()
        done = False
        step = 0
        while not done:
            phase = (step // 3) % 4
            _, _, done = engine.step(np.full(net.n, phase))
            step += 1
        trace_path = out_dir / f"trace_{spec.name}.csv"
        write_vehicle_trace(trace_path, engine.vehicles)
        rows = read_vehicle_trace(trace_path)
        vids, fmat = analytics.trace_features(rows, hyper.turn_discount)
        ids.extend(f"{spec.name}:{v}" for v in vids)
        feats.extend(fmat)
        labels.extend([spec.name] * len(vids))

    report.write_csv(out_dir / "analytics.csv", report.ANALYTICS_COLUMNS, analytics_rows)

    if len(feats) >= 4:
        pca = analytics.pca_project(feats, k=3)
        coords = pca.coords
        if coords.shape[1] < 3:
            coords = np.pad(coords, ((0, 0), (0, 3 - coords.shape[1])))
        report.write_csv(out_dir / "pca.csv", report.PCA_COLUMNS,
                         [(vid, float(c[0]), float(c[1]), float(c[2]))
                          for vid, c in zip(ids, coords)])
        report.pca_scatter_figure(out_dir / "pca_scatter.svg", coords, labels)
    return analytics_rows
