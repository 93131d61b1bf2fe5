"""Stage 2: attention branch distilled from the frozen DQN's greedy actions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dqn import ACTION_COUNT, DqnNetwork, plan_episode, run_episode
from .planner import PlannerConfig
from .rng import stream
from .sim import SimConfig, WorldMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BranchConfig:
    epochs: int = 100
    lr: float = 0.1
    lr_milestones: tuple[int, ...] = (50, 75)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    harvest_episodes: int = 500
    harvest_epsilon: float = 0.05
    holdout_fraction: float = 0.1


def lr_at(epoch: int, cfg: BranchConfig = BranchConfig()) -> float:
    """Step schedule: divide by ``1/lr_factor`` at each milestone epoch."""
    drops = sum(1 for m in cfg.lr_milestones if epoch >= m)
    return cfg.lr * cfg.lr_factor ** drops


def one_hot_from_q(q) -> np.ndarray:
    """One-hot vector(s) at the argmax of the Q-values, lowest index on ties."""
    q = np.asarray(q)
    out = np.zeros(q.shape, dtype=np.float64)
    idx = np.argmax(q, axis=-1)
    np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
    return out


class AttentionBranch:
    """conv3x3 (padded) -> ReLU -> conv1x1 to one map per action -> ReLU -> GAP.

    The per-action maps ``M`` are kept for the attention map; the pooled
    values are the logits of the action distribution ``p``.
    """

    def __init__(self, in_channels: int = 32, rng=None, dtype=nn.DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng()
        self.conv = nn.Conv2d(in_channels, 32, 3, 1, padding=1, rng=rng, dtype=dtype, input_grad=False,
                              name="branch.conv")
        self.relu = nn.ReLU()
        self.conv_k = nn.Conv2d(32, ACTION_COUNT, 1, rng=rng, dtype=dtype, name="branch.maps")
        self.conv_k.bias.data[...] = 0.1  # keep the map units alive at the start
        self.relu_k = nn.ReLU()
        self.gap = nn.GlobalAvgPool()

    @property
    def layers(self):
        return [self.conv, self.relu, self.conv_k, self.relu_k, self.gap]

    def params(self) -> list[nn.Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def named_params(self):
        return [(p.name, p) for p in self.params()]

    def forward(self, features: np.ndarray):
        """Returns ``(probs, logits, maps)``; maps have shape (N, k, h, w)."""
        maps = self.relu_k(self.conv_k(self.relu(self.conv(features))))
        logits = self.gap(maps)
        return nn.softmax(logits, axis=1), logits, maps

    def backward(self, grad_logits: np.ndarray) -> None:
        self.conv.backward(self.relu.backward(self.conv_k.backward(self.relu_k.backward(self.gap.backward(grad_logits)))))


def branch_loss(frames, polars, trunk: DqnNetwork, branch: AttentionBranch, backward: bool = True) -> float:
    """Cross-entropy between the branch distribution and the one-hot DQN action.

    Gradients reach the branch parameters only; the trunk must be frozen.
    """
    if not trunk.frozen:
        raise nn.FrozenError("branch training requires a frozen DQN trunk")
    q, feats = trunk.q_values(frames, polars)
    probs, logits, _ = branch.forward(feats.astype(branch.conv.weight.data.dtype))
    loss, grad = nn.cross_entropy(probs, one_hot_from_q(q))
    if backward:
        branch.backward(grad.astype(logits.dtype))
    return loss


# ------------------------------------------------------------ attention maps


def upsample_bilinear(maps: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of the last two axes to ``size x size`` (half-pixel centres)."""
    maps = np.asarray(maps, dtype=np.float64)
    h, w = maps.shape[-2:]

    def matrix(n_in):
        pos = np.clip((np.arange(size) + 0.5) * n_in / size - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        m = np.zeros((size, n_in))
        m[np.arange(size), lo] += 1 - frac
        m[np.arange(size), hi] += frac
        return m

    return matrix(h) @ maps @ matrix(w).T


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Per-map min-max scaling to [0, 1]; constant maps become all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    flat = raw.reshape(-1, raw.shape[-2] * raw.shape[-1])
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    out = np.where(span > 0, (flat - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out.reshape(raw.shape)


def attention_from_maps(maps: np.ndarray, size: int) -> np.ndarray:
    """Channel-mean of (N, k, h, w) action maps, upsampled and normalised."""
    return normalize_map(upsample_bilinear(np.asarray(maps).mean(axis=1), size))


@dataclass
class AttentionResult:
    maps: np.ndarray     # (N, H, W) normalised attention
    probs: np.ndarray    # (N, 3) branch distribution
    q: np.ndarray        # (N, 3) DQN Q-values
    raw: np.ndarray      # (N, h, w) channel-mean before upsampling


def attention_maps(trunk: DqnNetwork, branch: AttentionBranch, frames, polars, chunk: int = 256) -> AttentionResult:
    """Q-values, branch distribution and attention maps in one forward pass."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    polars = np.asarray(polars, dtype=np.float64).reshape(-1, 2)
    out = {"maps": [], "probs": [], "q": [], "raw": []}
    for i in range(0, len(frames), chunk):
        q, feats = trunk.q_values(frames[i:i + chunk], polars[i:i + chunk], chunk=chunk)
        probs, _, m = branch.forward(feats)
        raw = m.mean(axis=1)
        out["maps"].append(normalize_map(upsample_bilinear(raw, frames.shape[-1])))
        out["probs"].append(probs)
        out["q"].append(q)
        out["raw"].append(raw)
    return AttentionResult(**{k: np.concatenate(v) for k, v in out.items()})


def attention_map(trunk, branch, frame, subgoal) -> AttentionResult:
    return attention_maps(trunk, branch, frame[None], [(subgoal.angle, subgoal.distance)])


# ------------------------------------------------------------ distillation


@dataclass
class DistillDataset:
    frames: np.ndarray    # (N, H, W) uint8
    polars: np.ndarray    # (N, 2) angle, distance
    labels: np.ndarray    # (N,) frozen-DQN argmax
    train_idx: np.ndarray
    holdout_idx: np.ndarray

    def __len__(self):
        return len(self.labels)


def collect_rollout_states(trunk: DqnNetwork, world: WorldMap, sim_cfg: SimConfig, planner_cfg: PlannerConfig,
                           episodes: int, epsilon: float, seed: int, stream_name: str):
    """Frames and sub-goal inputs visited by epsilon-greedy rollouts of ``trunk``."""
    frames, polars = [], []
    rng = stream(seed, stream_name + ".policy")

    def record(t, _q):
        frames.append(t.state)
        polars.append((t.subgoal.angle, t.subgoal.distance))

    for ep in range(episodes):
        episode = plan_episode(world, sim_cfg, planner_cfg, seed, stream_name, ep)
        if episode is None:
            continue
        run_episode(trunk, episode, epsilon, rng, record)
    n = sim_cfg.frame_size
    return (np.array(frames, dtype=np.uint8).reshape(-1, n, n), np.array(polars, dtype=np.float64).reshape(-1, 2))


def make_dataset(trunk: DqnNetwork, frames, polars, holdout_fraction: float, rng) -> DistillDataset:
    q, _ = trunk.q_values(frames, polars)
    labels = np.argmax(q, axis=1)
    perm = rng.permutation(len(labels))
    n_hold = int(round(holdout_fraction * len(labels)))
    return DistillDataset(np.asarray(frames), np.asarray(polars), labels, np.sort(perm[n_hold:]), np.sort(perm[:n_hold]))


def harvest_dataset(trunk: DqnNetwork, world: WorldMap, sim_cfg: SimConfig, planner_cfg: PlannerConfig,
                    cfg: BranchConfig = BranchConfig(), seed: int = 0, episodes: int | None = None) -> DistillDataset:
    episodes = cfg.harvest_episodes if episodes is None else episodes
    frames, polars = collect_rollout_states(trunk, world, sim_cfg, planner_cfg, episodes, cfg.harvest_epsilon,
                                            seed, "harvest")
    return make_dataset(trunk, frames, polars, cfg.holdout_fraction, stream(seed, "harvest.split"))


@dataclass
class FinetuneResult:
    branch: AttentionBranch
    rows: list = field(default_factory=list)
    initial_holdout_agreement: float = float("nan")

    @property
    def final_holdout_agreement(self) -> float:
        return self.rows[-1]["holdout_agreement"] if self.rows else self.initial_holdout_agreement


def _agreement(branch, feats, labels, chunk=1024) -> float:
    if len(labels) == 0:
        return float("nan")
    hits = 0
    for i in range(0, len(labels), chunk):
        probs, _, _ = branch.forward(feats[i:i + chunk])
        hits += int((np.argmax(probs, axis=1) == labels[i:i + chunk]).sum())
    return hits / len(labels)


def finetune(trunk: DqnNetwork, dataset: DistillDataset, cfg: BranchConfig = BranchConfig(), seed: int = 0,
             epochs: int | None = None) -> FinetuneResult:
    """Train a fresh branch on the frozen trunk's features with SGD + momentum."""
    if len(dataset) == 0 or len(dataset.train_idx) == 0:
        raise ValueError("distillation dataset is empty")
    if not trunk.frozen:
        raise nn.FrozenError("finetune requires a frozen DQN trunk")
    epochs = cfg.epochs if epochs is None else epochs
    _, feats = trunk.q_values(dataset.frames, dataset.polars)
    branch = AttentionBranch(feats.shape[1], rng=stream(seed, "branch.init"), dtype=trunk.dtype)
    opt = nn.SGDMomentum(branch.params(), cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    tr, ho = dataset.train_idx, dataset.holdout_idx
    result = FinetuneResult(branch, [], _agreement(branch, feats[ho], dataset.labels[ho]))
    eye = np.eye(ACTION_COUNT)
    for epoch in range(epochs):
        opt.lr = lr_at(epoch, cfg)
        order = stream(seed, "branch.shuffle", epoch).permutation(tr)
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            probs, logits, _ = branch.forward(feats[idx])
            loss, grad = nn.cross_entropy(probs, eye[dataset.labels[idx]])
            opt.zero_grad()
            branch.backward(grad.astype(logits.dtype))
            opt.step()
            losses.append(loss * len(idx))
        row = {"epoch": epoch, "lr": opt.lr, "loss": float(np.sum(losses) / len(order)),
               "train_agreement": _agreement(branch, feats[tr], dataset.labels[tr]),
               "holdout_agreement": _agreement(branch, feats[ho], dataset.labels[ho])}
        result.rows.append(row)
        log.info("epoch %d lr %.4g loss %.4f train %.3f holdout %.3f", epoch, row["lr"], row["loss"],
                 row["train_agreement"], row["holdout_agreement"])
    return result
