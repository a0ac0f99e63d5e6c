"""Experiment configuration files (YAML) and their validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..params import Hyper, DEFAULT_HYPER

MODES = ("pretrain", "transfer", "ablation")
VARIANTS = ("edq", "eq", "both")


class ConfigError(Exception):
    """Malformed or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    mode: str
    grid: tuple[int, int]
    flow: str
    episodes: int
    seeds: list[int]
    out_dir: Path
    pool: Path | None = None          # manifest, required in transfer mode
    variant: str = "both"             # ablation: which variant(s) to run
    trace: bool = False               # emit step/vehicle traces of a greedy rollout
    hyper: Hyper = field(default_factory=lambda: DEFAULT_HYPER)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.grid) != 2 or any(int(g) < 1 for g in self.grid):
            raise ConfigError(f"grid must be two positive integers, got {self.grid}")
        if self.episodes < 0:
            raise ConfigError(f"episodes must be nonnegative, got {self.episodes}")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if self.mode == "transfer" and self.pool is None:
            raise ConfigError("transfer mode requires a pool manifest path")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def load_config(path, seed_offset: int = 0) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")

    hyper_overrides = raw.pop("hyper", {}) or {}
    known = {f.name for f in dataclasses.fields(Hyper)}
    unknown = set(hyper_overrides) - known
    if unknown:
        raise ConfigError(f"{path}: unknown hyper keys {sorted(unknown)}")
    hyper = DEFAULT_HYPER.replace(**hyper_overrides)

    try:
        cfg = ExperimentConfig(
            mode=str(raw["mode"]),
            grid=tuple(int(x) for x in raw["grid"]),
            flow=str(raw["flow"]),
            episodes=int(raw["episodes"]),
            seeds=[int(s) + seed_offset for s in raw["seeds"]],
            out_dir=Path(raw.get("out_dir", "runs")),
            pool=Path(raw["pool"]) if raw.get("pool") else None,
            variant=str(raw.get("variant", "both")),
            trace=bool(raw.get("trace", False)),
            hyper=hyper,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if cfg.pool is not None and not cfg.pool.is_absolute():
        cfg.pool = path.parent / cfg.pool
    cfg.validate()
    return cfg
