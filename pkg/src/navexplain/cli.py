"""Command-line entry point: ``navexplain <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .sim import InfeasibleStart, MapError


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="navexplain", description="Navigation DQN with attention-branch explanations")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the DQN and write a frozen trunk checkpoint")
    p.add_argument("--episodes", type=int, help="override the number of training episodes")

    p = sub.add_parser("distill", parents=[common], help="fit the attention branch on the frozen trunk")
    p.add_argument("--checkpoint", type=Path, help="trunk checkpoint (default: OUT/trunk.ckpt)")
    p.add_argument("--epochs", type=int, help="override the number of epochs")

    p = sub.add_parser("eval-nav", parents=[common], help="greedy navigation trials")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--trials", type=int)

    p = sub.add_parser("explain", parents=[common], help="attention and VisualBackProp images, angle sweeps")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--states", type=int, help="number of states to render (default 10)")

    p = sub.add_parser("metrics", parents=[common], help="deletion/insertion curves and AUC summary")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--states", type=int)

    sub.add_parser("plan-debug", parents=[common], help="plan once on the map and dump the tree")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = args.out
        if args.command == "train":
            pipeline.train(cfg, out, args.episodes)
        elif args.command == "distill":
            result, _ = pipeline.distill(cfg, out, args.checkpoint, args.epochs)
            print(f"holdout agreement {result.final_holdout_agreement:.4f}")
        elif args.command == "eval-nav":
            stats = pipeline.eval_nav(cfg, out, args.checkpoint, args.trials)
            print(f"successes {stats.successes}/{stats.trials} collisions {stats.collisions} "
                  f"avg_dist_to_goal {stats.avg_final_distance:.3f}")
        elif args.command == "explain":
            pipeline.explain(cfg, out, args.checkpoint, args.states)
        elif args.command == "metrics":
            curves = pipeline.metrics(cfg, out, args.checkpoint, args.states)
            for (kind, source), c in sorted(curves.items()):
                print(f"{kind:9s} {source:15s} auc {c.auc:.4f}")
        elif args.command == "plan-debug":
            result = pipeline.plan_debug(cfg, out)
            print(f"path cost {result.cost:.3f} with {len(result.path)} waypoints")
    except (pipeline.PipelineError, CheckpointError, ConfigError, MapError, InfeasibleStart, OSError) as exc:
        print(f"navexplain {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
