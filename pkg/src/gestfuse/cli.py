"""Command-line entry point.

    gestfuse simulate   --out DIR [--users N] [--commands N] [--confusable]
    gestfuse preprocess --data DIR
    gestfuse features   --data DIR
    gestfuse train      --data DIR --combo C --selector S [--out FILE]
    gestfuse eval       --data DIR (--grid | --reduced | --ablation) [--out DIR]
    gestfuse report     --data DIR [--out DIR]

Global flags: --seed, --config (JSON/YAML pipeline config), --jobs. The
dataset root defaults to the GESTFUSE_DATA_ROOT environment variable.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import dataset, harness, model
from .config import (DATA_ROOT_ENV, PipelineConfig, default_data_root,
                     load_config)
from .types import PipelineError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--config", type=Path, default=None,
                   help="pipeline config file (JSON or YAML)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--data", type=Path, default=None,
                   help=f"dataset root (default ${DATA_ROOT_ENV})")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gestfuse",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a raw dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, default=None, help="dataset root to create")
    p.add_argument("--users", type=int, default=None)
    p.add_argument("--commands", type=int, default=None,
                   help="commands per session")
    p.add_argument("--confusable", action="store_true",
                   help="shrink inter-gesture contrasts per modality")

    p = sub.add_parser("preprocess", help="raw sessions to gesture samples")
    _add_common(p)

    p = sub.add_parser("features", help="samples to per-combo feature bundles")
    _add_common(p)

    p = sub.add_parser("train", help="train one (combo, selector) model")
    _add_common(p)
    p.add_argument("--combo", required=True, choices=harness.COMBO_ORDER)
    p.add_argument("--selector", required=True, choices=harness.SELECTOR_ORDER)
    p.add_argument("--out", type=Path, default=None, help="checkpoint path")

    p = sub.add_parser("eval", help="run the evaluation matrix")
    _add_common(p)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--grid", action="store_true",
                      help="full combo x selector grid (default)")
    mode.add_argument("--reduced", action="store_true",
                      help="reduced-vocabulary tasks (runs the grid first)")
    mode.add_argument("--ablation", action="store_true",
                      help="optimization ablations (runs the grid first)")
    p.add_argument("--out", type=Path, default=None, help="report directory")

    p = sub.add_parser("report", help="re-render report.json to CSV and text")
    _add_common(p)
    p.add_argument("--out", type=Path, default=None, help="report directory")
    return ap


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    users = getattr(args, "users", None)
    if users is not None:
        cfg = dataclasses.replace(
            cfg, sim=dataclasses.replace(cfg.sim, n_users=users))
    commands = getattr(args, "commands", None)
    if commands is not None:
        cfg = dataclasses.replace(
            cfg, sim=dataclasses.replace(cfg.sim, commands_per_session=commands))
    if getattr(args, "confusable", False):
        cfg = dataclasses.replace(
            cfg, sim=dataclasses.replace(cfg.sim, confusable=True))
    return cfg


def _data_root(args, parser: argparse.ArgumentParser) -> Path:
    root = args.data or default_data_root()
    if root is None:
        parser.error(f"missing dataset path: pass --data or set ${DATA_ROOT_ENV}")
    return Path(root)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = _config(args)

    try:
        if args.command == "simulate":
            root = args.out or args.data or default_data_root()
            if root is None:
                parser.error(f"missing dataset path: pass --out or set ${DATA_ROOT_ENV}")
            written = harness.run_simulate(Path(root), cfg, args.seed, args.jobs)
            print(f"simulate: {len(written)} sessions -> {root}")
            return 0

        root = _data_root(args, parser)

        if args.command == "preprocess":
            reports = harness.run_preprocess(root, cfg, args.jobs)
            n = sum(r["n_samples"] for r in reports)
            print(f"preprocess: {len(reports)} sessions -> {n} samples")
            return 0

        if args.command == "features":
            paths = harness.run_features(root, cfg, args.seed, args.jobs)
            print(f"features: bundles for {len(paths)} combos -> {root / 'features'}")
            return 0

        if args.command == "train":
            if not harness.selector_valid(args.combo, args.selector):
                raise PipelineError(
                    f"combo-selector-invalid: ({args.combo}, {args.selector})")
            bundles = harness.load_bundles(root, args.combo)
            m = model.train_fusion(bundles, args.combo, args.selector, cfg.train,
                                   args.seed)
            out = args.out or root / "models" / f"{args.combo}_{args.selector}.ckpt"
            Path(out).parent.mkdir(parents=True, exist_ok=True)
            m.save(out)
            print(f"train: {args.combo}/{args.selector} "
                  f"epochs={m.history['epochs']} "
                  f"train_acc={m.history['final_train_acc']:.3f} -> {out}")
            return 0

        if args.command == "eval":
            grid = harness.run_grid(root, cfg, args.seed, args.jobs)
            reduced = ablation = None
            if args.reduced:
                reduced = harness.run_reduced(root, cfg, args.seed, grid, args.jobs)
            if args.ablation:
                ablation = harness.run_ablation(root, cfg, args.seed, grid, args.jobs)
            report = harness.assemble_report(cfg, args.seed, grid, reduced, ablation)
            out = args.out or root / "report"
            path = harness.write_report(out, report)
            print(f"eval: report -> {path}")
            return 0

        if args.command == "report":
            src = root / "report" / "report.json"
            if not src.exists():
                raise PipelineError(f"missing-report: {src}")
            report = json.loads(src.read_text())
            out = args.out or src.parent
            harness.write_report(out, report)
            print(f"report: rendered -> {out}")
            return 0
    except PipelineError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
