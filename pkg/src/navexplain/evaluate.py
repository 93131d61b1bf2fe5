"""Explanation quality metrics, baselines and navigation statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .branch import AttentionBranch, attention_maps, collect_rollout_states, normalize_map, upsample_bilinear
from .dqn import ACTION_COUNT, DqnNetwork, plan_episode, run_episode
from .planner import PlannerConfig
from .rng import stream
from .sim import FLOOR, NUM_CLASSES, SimConfig, WorldMap, one_hot_frames


@dataclass(frozen=True)
class EvalConfig:
    states: int = 1000
    steps: int = 50
    trials: int = 50
    rollout_episodes: int = 200
    probe_states: int = 100
    random_seeds: int = 20


# ------------------------------------------------------------ saliency sources


def visual_backprop_from_means(means: list[np.ndarray], size: int) -> np.ndarray:
    """Combine channel-mean activations, shallowest first, into a saliency map.

    Starting from the deepest layer, the running map is upsampled to the next
    shallower layer's resolution and multiplied with its mean; the result is
    finally upsampled to ``size`` and min-max normalised.
    """
    m = np.asarray(means[-1], dtype=np.float64)
    for shallower in reversed(means[:-1]):
        m = upsample_bilinear(m, shallower.shape[-1]) * shallower
    return normalize_map(upsample_bilinear(m, size))


def visual_backprop(trunk: DqnNetwork, frames, polars, chunk: int = 256) -> np.ndarray:
    """VisualBackProp saliency (N, H, W) over the trunk's three conv layers."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    out = []
    for i in range(0, len(frames), chunk):
        trunk.q_values(frames[i:i + chunk], polars[i:i + chunk], chunk=chunk)
        acts = trunk.activations
        means = [acts[k].mean(axis=1) for k in ("conv1", "conv2", "conv3")]
        out.append(visual_backprop_from_means(means, frames.shape[-1]))
    return np.concatenate(out)


def random_saliency(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.random(shape)


# ------------------------------------------------------------ deletion / insertion


@dataclass
class MetricCurve:
    fractions: np.ndarray
    accuracy: np.ndarray
    source: str = ""

    @property
    def auc(self) -> float:
        return float(np.trapezoid(self.accuracy, self.fractions))


def pixel_ranks(saliency: np.ndarray) -> np.ndarray:
    """Rank of each pixel by descending saliency, ties in raster order."""
    flat = saliency.reshape(len(saliency), -1)
    order = np.argsort(-flat, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(flat.shape[1])[None, :].repeat(len(flat), 0), axis=1)
    return ranks.reshape(saliency.shape)


def _curve(trunk, frames, polars, saliency, steps, mode, labels=None, chunk=256) -> MetricCurve:
    frames = np.asarray(frames)
    saliency = np.asarray(saliency)
    if saliency.shape != frames.shape:
        raise ValueError(f"saliency shape {saliency.shape} does not match frames {frames.shape}")
    polars = np.asarray(polars, dtype=np.float64).reshape(-1, 2)
    if labels is None:
        labels = np.argmax(trunk.q_values(frames, polars, chunk=chunk)[0], axis=1)
    ranks = pixel_ranks(saliency)
    npix = frames.shape[1] * frames.shape[2]
    fractions = np.arange(steps + 1) / steps
    acc = np.empty(steps + 1)
    for k, f in enumerate(fractions):
        top = ranks < int(round(f * npix))
        if mode == "deletion":
            x = np.where(top, FLOOR, frames).astype(np.uint8)
        else:
            x = np.where(top, frames, FLOOR).astype(np.uint8)
        pred = np.argmax(trunk.q_values(x, polars, chunk=chunk)[0], axis=1)
        acc[k] = float(np.mean(pred == labels))
    return MetricCurve(fractions, acc)


def deletion_curve(trunk, frames, polars, saliency, steps: int = 50, labels=None) -> MetricCurve:
    """Agreement with the unmodified action as top-ranked pixels become floor."""
    return _curve(trunk, frames, polars, saliency, steps, "deletion", labels)


def insertion_curve(trunk, frames, polars, saliency, steps: int = 50, labels=None) -> MetricCurve:
    """Agreement as top-ranked pixels are revealed on an all-floor frame."""
    return _curve(trunk, frames, polars, saliency, steps, "insertion", labels)


# ------------------------------------------------------------ attention analyses


def attention_center_column(maps: np.ndarray) -> np.ndarray:
    """Column index of the attention centre of mass; nan for all-zero maps."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    col_mass = maps.sum(axis=1)
    total = col_mass.sum(axis=1)
    cols = np.arange(maps.shape[2])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, (col_mass * cols).sum(axis=1) / total, np.nan)


@dataclass
class ActionAverage:
    count: int
    mean_frame: np.ndarray | None      # (3, H, W) mean one-hot frame
    mean_attention: np.ndarray | None  # (H, W)

    @property
    def present(self) -> bool:
        return self.count > 0


def averaged_attention_per_action(trunk, branch, frames, polars) -> list[ActionAverage]:
    """Mean one-hot frame and mean attention map per greedy DQN action."""
    res = attention_maps(trunk, branch, frames, polars)
    actions = np.argmax(res.q, axis=1)
    out = []
    for a in range(ACTION_COUNT):
        sel = actions == a
        if not sel.any():
            out.append(ActionAverage(0, None, None))
            continue
        out.append(ActionAverage(int(sel.sum()), one_hot_frames(np.asarray(frames)[sel], np.float64).mean(axis=0),
                                 res.maps[sel].mean(axis=0)))
    return out


SWEEP_ANGLES = (0.0, math.pi / 4, -math.pi / 4)


def angle_sweep(trunk, branch, frame, angles=SWEEP_ANGLES, distance: float = 1.0) -> np.ndarray:
    """Attention maps for one frame under different sub-goal angles.

    Angles follow the sweep protocol convention: positive means the sub-goal
    is to the robot's right (front-right for ``+pi/4``).  They are negated
    into the simulator's left-positive convention before evaluation.
    """
    frames = np.repeat(np.asarray(frame)[None], len(angles), axis=0)
    polars = [(-a, distance) for a in angles]
    return attention_maps(trunk, branch, frames, polars).maps


# ------------------------------------------------------------ navigation


@dataclass
class NavStats:
    successes: int
    trials: int
    avg_final_distance: float
    collisions: int
    skipped: int = 0

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else float("nan")

    def as_row(self) -> dict:
        return {"successes": self.successes, "trials": self.trials, "avg_dist_to_goal": self.avg_final_distance,
                "collisions": self.collisions, "skipped": self.skipped}


def evaluate_navigation(trunk: DqnNetwork, world: WorldMap, sim_cfg: SimConfig = SimConfig(),
                        planner_cfg: PlannerConfig = PlannerConfig(), trials: int = 50, seed: int = 0) -> NavStats:
    """Greedy trials from random starts; success iff final distance < goal radius."""
    successes = collisions = skipped = 0
    dists = []
    for t in range(trials):
        episode = plan_episode(world, sim_cfg, planner_cfg, seed, "eval.nav", t)
        if episode is None:
            skipped += 1
            continue
        run_episode(trunk, episode, 0.0, stream(seed, "eval.nav.policy", t))
        d = episode.distance_to_goal()
        dists.append(d)
        collisions += int(episode.crashed)
        successes += int(d < sim_cfg.goal_radius and not episode.crashed)
    return NavStats(successes, trials - skipped, float(np.mean(dists)) if dists else float("nan"), collisions, skipped)


def sample_eval_states(trunk: DqnNetwork, world: WorldMap, sim_cfg: SimConfig, planner_cfg: PlannerConfig,
                       n_states: int, episodes: int, seed: int):
    """``n_states`` states drawn without replacement from greedy rollouts."""
    frames, polars = collect_rollout_states(trunk, world, sim_cfg, planner_cfg, episodes, 0.0, seed, "eval.states")
    if len(frames) == 0:
        raise RuntimeError("greedy rollouts produced no states")
    rng = stream(seed, "eval.states.pick")
    idx = np.sort(rng.choice(len(frames), size=min(n_states, len(frames)), replace=False))
    return frames[idx], polars[idx]


def class_histogram(frames) -> np.ndarray:
    return np.bincount(np.asarray(frames).ravel(), minlength=NUM_CLASSES)
