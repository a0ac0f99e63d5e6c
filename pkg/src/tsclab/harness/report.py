"""Delimited outputs and the matplotlib figures rendered next to them.

Schemas are fixed; floats are written with repr() so repeated runs produce
byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

TRAIN_LOG_COLUMNS = ("episode", "m_tt", "m_th", "m_q", "mean_loss_D", "mean_loss_Q")
SUMMARY_COLUMNS = ("flow", "method", "seed", "m_tt", "m_th", "m_q", "ar", "pe")
GUIDE_LOG_COLUMNS = ("episode", "step", "intersection", "guide_index",
                     "D_values", "probability", "m_tt_running")
ANALYTICS_COLUMNS = ("flow", "density", "entropy")
PCA_COLUMNS = ("vehicle_id", "c1", "c2", "c3")


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_csv(path, columns, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def write_training_log(path, stats) -> None:
    write_csv(path, TRAIN_LOG_COLUMNS,
              [(s.episode, float(s.m_tt), s.m_th, float(s.m_q),
                float(s.mean_loss_d), float(s.mean_loss_q)) for s in stats])


def read_training_log(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def write_guide_log(path, events) -> None:
    rows = []
    for e in events:
        weights = ";".join(repr(float(w)) for w in e.weights) if e.weights is not None else ""
        rows.append((e.episode, e.step, e.intersection, e.guide,
                     weights, float(e.probability), float(e.mtt_running)))
    write_csv(path, GUIDE_LOG_COLUMNS, rows)


def write_summary(path, rows) -> None:
    formatted = []
    for flow, method, seed, m_tt, m_th, m_q, ar, pe in rows:
        formatted.append((flow, method, seed, float(m_tt), m_th, float(m_q),
                          "" if ar is None else float(ar),
                          "" if pe is None else float(pe)))
    write_csv(path, SUMMARY_COLUMNS, formatted)


def learning_curve_figure(path, series_by_label: dict, ylabel: str = "average travel time (s)") -> None:
    """One line per (label -> per-episode series), SVG next to the CSVs."""
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    for label, series in series_by_label.items():
        ax.plot(range(1, len(series) + 1), series, label=label, linewidth=1.2)
    ax.set_xlabel("episode")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    if len(series_by_label) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def pca_scatter_figure(path, coords, labels) -> None:
    """Scatter of the first two principal coordinates, colored per flow."""
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    labels = list(labels)
    for name in sorted(set(labels)):
        idx = [i for i, l in enumerate(labels) if l == name]
        ax.scatter(coords[idx, 0], coords[idx, 1], s=4, alpha=0.5, label=name)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend(fontsize=8, markerscale=2)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
