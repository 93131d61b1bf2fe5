"""End-to-end stages behind the CLI subcommands.

Every stage reads and writes files in one output directory:

    trunk.ckpt, train_log.csv            train
    branch.ckpt, distill_log.csv,
    distill_summary.csv                  distill
    navstats.csv                         eval-nav
    deletion.csv, insertion.csv,
    auc_summary.csv                      metrics
    explain/*.ppm, explain/sweep.csv     explain
    plan.txt                             plan-debug
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

from .branch import AttentionBranch, attention_maps, finetune, harvest_dataset
from .checkpoint import CheckpointError, apply_checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .dqn import DqnNetwork, run_training
from .evaluate import (ACTION_COUNT, SWEEP_ANGLES, angle_sweep, attention_center_column,
                       averaged_attention_per_action, deletion_curve, evaluate_navigation, insertion_curve,
                       random_saliency, sample_eval_states, visual_backprop)
from .export import map_gray, mean_frame_rgb, overlay, frame_rgb, write_csv, write_ppm
from .planner import dump_plan, plan_robot_path
from .rng import stream
from .sim import ACTIONS, load_map, reset

log = logging.getLogger(__name__)

TRUNK_FILE = "trunk.ckpt"
BRANCH_FILE = "branch.ckpt"
TRAIN_LOG_COLUMNS = ["episode", "return", "steps", "success", "epsilon", "td_loss_mean"]
DISTILL_LOG_COLUMNS = ["epoch", "lr", "loss", "train_agreement", "holdout_agreement"]
NAV_COLUMNS = ["successes", "trials", "avg_dist_to_goal", "collisions", "skipped"]
SOURCES = ("branch", "visualbackprop", "random")


class PipelineError(RuntimeError):
    """A stage cannot run (missing or unsuitable inputs)."""


def _world(cfg: RunConfig):
    world = load_map(cfg.sim.map_file or None, cfg.sim.robot_radius)
    if world.goal is None:
        raise PipelineError("map file has no 'goal' line")
    return world


def load_trunk(path, cfg: RunConfig, require_frozen: bool = True) -> DqnNetwork:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"trunk checkpoint {path} not found; run 'train' first")
    ckpt = load_checkpoint(path)
    if require_frozen and not ckpt.frozen:
        raise PipelineError(f"trunk checkpoint {path} is not frozen; stage 1 did not complete")
    net = DqnNetwork(frame_size=cfg.sim.frame_size, d_max=cfg.dqn.d_max)
    apply_checkpoint(ckpt, net.named_params(), str(path))
    if ckpt.frozen:
        net.freeze()
    return net


def load_branch(path, trunk: DqnNetwork) -> AttentionBranch:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"branch checkpoint {path} not found; run 'distill' first")
    branch = AttentionBranch(trunk.feature_shape[0])
    apply_checkpoint(load_checkpoint(path), branch.named_params(), str(path))
    return branch


def train(cfg: RunConfig, out: Path, episodes: int | None = None) -> DqnNetwork:
    world = _world(cfg)
    net, rows = run_training(world, cfg.sim, cfg.planner, cfg.dqn, cfg.seed, episodes)
    net.freeze()
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / TRUNK_FILE, net.named_params(), frozen=True, kind="trunk")
    write_csv(out / "train_log.csv", rows, TRAIN_LOG_COLUMNS)
    return net


def distill(cfg: RunConfig, out: Path, checkpoint: Path | None = None, epochs: int | None = None):
    trunk = load_trunk(checkpoint or out / TRUNK_FILE, cfg)
    before = trunk.checksum()
    world = _world(cfg)
    dataset = harvest_dataset(trunk, world, cfg.sim, cfg.planner, cfg.branch, cfg.seed)
    result = finetune(trunk, dataset, cfg.branch, cfg.seed, epochs)
    after = trunk.checksum()
    if before != after:
        raise PipelineError("trunk parameters changed during distillation")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / BRANCH_FILE, result.branch.named_params(), frozen=False, kind="branch")
    write_csv(out / "distill_log.csv", result.rows, DISTILL_LOG_COLUMNS)
    summary = {"records": len(dataset), "holdout": len(dataset.holdout_idx),
               "initial_holdout_agreement": result.initial_holdout_agreement,
               "final_holdout_agreement": result.final_holdout_agreement,
               "trunk_sha256_before": before, "trunk_sha256_after": after}
    write_csv(out / "distill_summary.csv", [summary], list(summary))
    return result, dataset


def eval_nav(cfg: RunConfig, out: Path, checkpoint: Path | None = None, trials: int | None = None):
    trunk = load_trunk(checkpoint or out / TRUNK_FILE, cfg)
    stats = evaluate_navigation(trunk, _world(cfg), cfg.sim, cfg.planner, trials or cfg.eval.trials, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "navstats.csv", [stats.as_row()], NAV_COLUMNS)
    return stats


def _models(cfg, out, checkpoint):
    trunk = load_trunk(checkpoint or out / TRUNK_FILE, cfg)
    return trunk, load_branch(out / BRANCH_FILE, trunk)


def eval_states(cfg: RunConfig, trunk: DqnNetwork, states: int | None = None):
    return sample_eval_states(trunk, _world(cfg), cfg.sim, cfg.planner, states or cfg.eval.states,
                              cfg.eval.rollout_episodes, cfg.seed)


def saliency_sources(cfg: RunConfig, trunk, branch, frames, polars) -> dict[str, np.ndarray]:
    return {"branch": attention_maps(trunk, branch, frames, polars).maps,
            "visualbackprop": visual_backprop(trunk, frames, polars),
            "random": random_saliency(frames.shape, stream(cfg.seed, "eval.random"))}


def metrics(cfg: RunConfig, out: Path, checkpoint: Path | None = None, states: int | None = None,
            state_set=None):
    """``state_set`` optionally supplies precomputed ``(frames, polars)``."""
    trunk, branch = _models(cfg, out, checkpoint)
    frames, polars = state_set if state_set is not None else eval_states(cfg, trunk, states)
    labels = np.argmax(trunk.q_values(frames, polars)[0], axis=1)
    curves = {}
    for source, sal in saliency_sources(cfg, trunk, branch, frames, polars).items():
        curves[("deletion", source)] = deletion_curve(trunk, frames, polars, sal, cfg.eval.steps, labels)
        curves[("insertion", source)] = insertion_curve(trunk, frames, polars, sal, cfg.eval.steps, labels)
    out.mkdir(parents=True, exist_ok=True)
    for kind in ("deletion", "insertion"):
        fractions = curves[(kind, SOURCES[0])].fractions
        rows = [{"fraction": f, **{s: curves[(kind, s)].accuracy[i] for s in SOURCES}}
                for i, f in enumerate(fractions)]
        write_csv(out / f"{kind}.csv", rows, ["fraction", *SOURCES])
    summary = [{"source": s, "deletion_auc": curves[("deletion", s)].auc,
                "insertion_auc": curves[("insertion", s)].auc, "states": len(frames)} for s in SOURCES]
    write_csv(out / "auc_summary.csv", summary, ["source", "deletion_auc", "insertion_auc", "states"])
    return curves


def explain(cfg: RunConfig, out: Path, checkpoint: Path | None = None, states: int | None = None):
    """Per-state attention and VisualBackProp images, angle sweeps and
    per-action averages under ``out/explain``."""
    trunk, branch = _models(cfg, out, checkpoint)
    frames, polars = eval_states(cfg, trunk, cfg.eval.states)
    dest = out / "explain"
    dest.mkdir(parents=True, exist_ok=True)
    n = min(states or 10, len(frames))
    att = attention_maps(trunk, branch, frames[:n], polars[:n])
    vbp = visual_backprop(trunk, frames[:n], polars[:n])
    sweep_rows = []
    for i in range(n):
        write_ppm(dest / f"state{i:03d}_frame.ppm", frame_rgb(frames[i]))
        write_ppm(dest / f"state{i:03d}_attention.ppm", map_gray(att.maps[i]))
        write_ppm(dest / f"state{i:03d}_overlay.ppm", overlay(frames[i], att.maps[i]))
        write_ppm(dest / f"state{i:03d}_vbp.ppm", map_gray(vbp[i]))
        sweep = angle_sweep(trunk, branch, frames[i])
        for a, m in zip(SWEEP_ANGLES, sweep):
            tag = {0.0: "front", math.pi / 4: "right", -math.pi / 4: "left"}[a]
            write_ppm(dest / f"state{i:03d}_sweep_{tag}.ppm", overlay(frames[i], m))
            sweep_rows.append({"state": i, "angle": a, "center_column": float(attention_center_column(m)[0])})
    write_csv(dest / "sweep.csv", sweep_rows, ["state", "angle", "center_column"])
    averages = averaged_attention_per_action(trunk, branch, frames, polars)
    avg_rows = []
    for a, avg in enumerate(averages):
        avg_rows.append({"action": ACTIONS[a], "count": avg.count,
                         "center_column": float(attention_center_column(avg.mean_attention)[0])
                         if avg.present else math.nan})
        if avg.present:
            write_ppm(dest / f"average_{ACTIONS[a]}_frame.ppm", mean_frame_rgb(avg.mean_frame))
            write_ppm(dest / f"average_{ACTIONS[a]}_attention.ppm", map_gray(avg.mean_attention))
    write_csv(dest / "averages.csv", avg_rows, ["action", "count", "center_column"])
    assert len(averages) == ACTION_COUNT
    return att


def plan_debug(cfg: RunConfig, out: Path):
    world = _world(cfg)
    start = reset(world, stream(cfg.seed, "plan-debug.start"), world.start_region, cfg.sim)
    result = plan_robot_path(start.xy, world.goal, world, cfg.planner, stream(cfg.seed, "plan-debug.planner"),
                             cfg.sim.robot_radius)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.txt").write_text(dump_plan(result))
    if not result.feasible:
        raise PipelineError("planner found no path to the goal")
    return result


__all__ = ["PipelineError", "CheckpointError", "train", "distill", "eval_nav", "metrics", "explain", "plan_debug",
           "load_trunk", "load_branch"]
