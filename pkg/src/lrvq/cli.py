"""Command-line entry point: ``lrvq <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_bundle, load_stage_one
from .config import Config, ConfigError, load_config, save_config
from .data import SceneFormatError, load_scenes, save_scenes, synthesize_dataset
from .sampler import evaluate_dataset
from .training import TrainingError, run_ablation, train_stage_one, train_stage_two, write_ablation

log = logging.getLogger("lrvq")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (defaults are used for missing sections)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrvq", description="Trajectory forecasting with a context-conditioned VQ codebook and a discrete diffusion prior.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic scene file")
    _common(p)
    p.add_argument("--scenes", type=int, help="override data.num_scenes")
    p.add_argument("--name", default="scenes.csv")

    p = sub.add_parser("train-stage1", help="train the VQ-VAE")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-stage2", help="train the diffusion prior on a frozen stage-one model")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stage1", type=Path, required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", help="best-of-K evaluation")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stage1", type=Path, required=True)
    p.add_argument("--stage2", type=Path, required=True)
    p.add_argument("--num-guesses", type=int, help="N raw guesses per agent")
    p.add_argument("-k", type=int, help="K trajectories kept for best-of-K")
    p.add_argument("--horizons", type=float, nargs="+", help="partial horizons in seconds")
    p.add_argument("--mode", choices=("centroid", "uniform"))
    p.add_argument("--plot-data", action="store_true", help="also write per-guess trajectories")

    p = sub.add_parser("ablate", help="codebook mode x rank grid")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--modes", nargs="+", default=["static", "full_rank", "low_rank"])
    p.add_argument("--ranks", type=int, nargs="+", default=[4, 16])
    return parser


def _config(args) -> Config:
    cfg = load_config(args.config)
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "scenes", None) is not None:
        over["data"] = {"num_scenes": args.scenes}
    if getattr(args, "epochs", None) is not None:
        key = "stage1_epochs" if args.command == "train-stage1" else "stage2_epochs"
        over["train"] = {key: args.epochs}
    if args.command == "evaluate":
        ev = {k: v for k, v in (("num_guesses", args.num_guesses), ("k", args.k), ("mode", args.mode)) if v is not None}
        if args.horizons:
            ev["horizons"] = args.horizons
        if ev:
            over["eval"] = ev
    cfg = cfg.replace(**over) if over else cfg
    return cfg.validate()


def _rng(cfg: Config, salt: int) -> np.random.Generator:
    # each subcommand draws from its own stream so stages stay reproducible in isolation
    return np.random.default_rng([cfg.seed, salt])


def cmd_synth(args, cfg: Config) -> None:
    scenes = synthesize_dataset(cfg.data, _rng(cfg, 0))
    path = args.out / args.name
    save_scenes(scenes, path)
    print(f"wrote {len(scenes)} scenes to {path}")


def cmd_stage1(args, cfg: Config) -> None:
    scenes = load_scenes(args.data)
    res = train_stage_one(scenes, cfg, _rng(cfg, 1), args.out)
    save_config(cfg, args.out / "config.json")
    print(f"stage one: {res.steps} steps, ADE_rec {res.ade_rec:.4f}, checkpoint {res.checkpoint_id}")


def cmd_stage2(args, cfg: Config) -> None:
    scenes = load_scenes(args.data)
    bundle = load_stage_one(args.stage1)
    res = train_stage_two(scenes, bundle, cfg, _rng(cfg, 2), args.out)
    print(f"stage two: accuracy {res.accuracy:.4f}, checkpoint {res.checkpoint_id}")


def cmd_evaluate(args, cfg: Config) -> None:
    scenes = load_scenes(args.data)
    bundle = load_bundle(args.stage1, args.stage2)
    res = evaluate_dataset(scenes, bundle, cfg.eval, _rng(cfg, 3), keep_plot_data=args.plot_data)
    res.write_table(args.out / "metrics_per_agent.csv")
    res.write_aggregate(args.out / "metrics.csv")
    if args.plot_data:
        res.write_plot_data(args.out / "plot_data.csv")
    for key, value in res.aggregate.items():
        if key.split("_")[1].startswith(cfg.eval.mode):
            print(f"{key}\t{value:.4f}")


def cmd_ablate(args, cfg: Config) -> None:
    scenes = load_scenes(args.data)
    rows = run_ablation(scenes, cfg, tuple(args.modes), tuple(args.ranks))
    write_ablation(rows, args.out / "ablation.csv")
    for row in rows:
        print(json.dumps(row))


COMMANDS = {
    "synth-data": cmd_synth,
    "train-stage1": cmd_stage1,
    "train-stage2": cmd_stage2,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, SceneFormatError, CheckpointError, TrainingError, FileNotFoundError, ValueError) as exc:
        print(f"lrvq {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
