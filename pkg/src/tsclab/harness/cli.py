"""Command-line entry point.

Exit codes: 0 on success, 2 on configuration errors, 3 when a post-run
consistency check requested with --check fails.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .. import nn
from .config import ConfigError, load_config
from . import report, runs


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsclab",
        description="Grid traffic-signal control lab: pretraining, policy-reuse "
                    "transfer, decoder ablation, and flow analytics.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, desc in (("pretrain", "train source agents on one flow"),
                       ("transfer", "adapt a target agent with a source-agent pool"),
                       ("ablation", "compare training with and without the decoder")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed-offset", type=int, default=0,
                       help="added to every seed in the config")
        p.add_argument("--check", action="store_true",
                       help="verify emitted artifacts; exit 3 on failure")

    p = sub.add_parser("analyze", help="characterize flow specs and project their traffic")
    p.add_argument("--flows", required=True, help="directory of flow spec YAML files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"),
                   help="override the grid used for density and traces")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _check_checkpoints(outputs) -> list[str]:
    problems = []
    for out in outputs:
        if out.checkpoint is None:
            continue
        tensors, _ = nn.load_checkpoint(out.checkpoint)
        saved = {k: v for k, v in tensors.items()}
        again = Path(str(out.checkpoint) + ".roundtrip")
        nn.save_checkpoint(again, saved, {})
        reread, _ = nn.load_checkpoint(again)
        again.unlink()
        for name, arr in saved.items():
            if not np.array_equal(arr, reread[name]):
                problems.append(f"{out.checkpoint}: tensor {name} does not round-trip")
    return problems


def _check_guide_logs(outputs, window: int) -> list[str]:
    problems = []
    for out in outputs:
        if out.guide_log is None:
            continue
        with open(out.guide_log) as fh:
            for row in csv.DictReader(fh):
                p = float(row["probability"])
                if not 0.0 <= p <= 1.0 + 1e-12:
                    problems.append(f"{out.guide_log}: probability {p} out of range")
                    break
                if int(row["step"]) % window != 0:
                    problems.append(f"{out.guide_log}: guide change off the window grid")
                    break
    return problems


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    try:
        if args.command == "analyze":
            rows = runs.run_analyze(args.flows, args.out,
                                    grid=tuple(args.grid) if args.grid else None,
                                    seed=args.seed)
            for name, density, entropy in rows:
                print(f"{name}: density={density:.3f} veh/lane/h  entropy={entropy:.4f} bits")
            return 0

        cfg = load_config(args.config, seed_offset=args.seed_offset)
        if cfg.mode != args.command:
            raise ConfigError(f"config mode {cfg.mode!r} does not match "
                              f"subcommand {args.command!r}")

        problems: list[str] = []
        if args.command == "pretrain":
            outputs = runs.run_pretrain(cfg)
            if args.check:
                problems += _check_checkpoints(outputs)
        elif args.command == "transfer":
            outputs = runs.run_transfer(cfg)
            if args.check:
                problems += _check_checkpoints(outputs)
                problems += _check_guide_logs(outputs, cfg.hyper.window)
        else:
            results = runs.run_ablation(cfg)
            outputs = [o for outs in results.values() for o in outs]
            if args.check and set(results) == {"edq", "eq"}:
                gap = runs.ablation_gap(results)
                print(f"decoder-ablation relative gap: {gap:.4f}")
                if gap > 0.10:
                    problems.append(f"ablation gap {gap:.4f} exceeds 0.10")

        for out in outputs:
            last = out.stats[-1] if out.stats else None
            if last is not None:
                print(f"{out.method} {out.flow} seed {out.seed}: "
                      f"m_tt={last.m_tt:.2f} m_th={last.m_th} m_q={last.m_q:.2f}")
        print(f"outputs written under {cfg.out_dir}")

        if problems:
            for p in problems:
                print(f"CHECK FAILED: {p}", file=sys.stderr)
            return 3
        return 0

    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
