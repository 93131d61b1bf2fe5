"""Stage 1: the navigation DQN, its replay buffer and training loop."""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .planner import PlannerConfig, extract_subgoals, plan_robot_path
from .rng import stream
from .sim import (ACTIONS, Episode, InfeasibleStart, SimConfig, SubGoalPolar, WorldMap,
                  one_hot_frames, reset)

log = logging.getLogger(__name__)

ACTION_COUNT = len(ACTIONS)


@dataclass(frozen=True)
class DqnConfig:
    episodes: int = 20000
    gamma: float = 0.99
    epsilon_start: float = 0.9
    epsilon_end: float = 0.1
    epsilon_decay_episodes: int = 80000
    buffer_capacity: int = 10000
    batch_size: int = 32
    target_sync: int = 1000
    lr: float = 2.5e-4
    lr_final: float = -1.0  # negative keeps lr constant; else linear anneal over the run
    rms_decay: float = 0.95
    rms_eps: float = 1e-6
    warmup: int = 1000
    train_every: int = 4
    d_max: float = 5.0
    double_q: bool = False  # online net picks a', target net scores it
    validate_every: int = 250  # 0 disables checkpoint selection
    validate_trials: int = 30

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        for eps in (self.epsilon_start, self.epsilon_end):
            if not 0.0 <= eps <= 1.0:
                raise ValueError("epsilon endpoints must lie in [0, 1]")


def encode_subgoals(angles, distances, d_max: float = 5.0, dtype=np.float32) -> np.ndarray:
    """Normalise (angle, distance) pairs to the network's two scalar inputs."""
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    distances = np.atleast_1d(np.asarray(distances, dtype=np.float64))
    return np.stack([angles / np.pi, np.clip(distances, 0.0, d_max) / d_max], axis=1).astype(dtype)


class DqnNetwork:
    """Conv trunk with a sub-goal embedding after conv1, and a Q head.

    64x64 input: conv1 -> 16x15x15, concat embedding -> 18x15x15,
    conv2 -> 32x6x6, conv3 -> 32x4x4 (the feature map ``F``), fc 512-256-3.
    """

    def __init__(self, rng=None, dtype=nn.DEFAULT_DTYPE, frame_size: int = 64, d_max: float = 5.0):
        rng = rng if rng is not None else np.random.default_rng()
        self.frame_size = frame_size
        self.d_max = d_max
        self.conv1 = nn.Conv2d(3, 16, 8, 4, rng=rng, dtype=dtype, input_grad=False, name="trunk.conv1")
        self.relu1 = nn.ReLU()
        side1 = self.conv1.output_shape((3, frame_size, frame_size))[1]
        self.embed_broadcast = nn.BroadcastScalars(side1, side1)
        self.embed_conv = nn.Conv2d(2, 2, 1, rng=rng, dtype=dtype, name="trunk.embed")
        self.embed_sigmoid = nn.Sigmoid()
        self.concat = nn.ConcatChannels()
        self.conv2 = nn.Conv2d(18, 32, 4, 2, rng=rng, dtype=dtype, name="trunk.conv2")
        self.relu2 = nn.ReLU()
        self.conv3 = nn.Conv2d(32, 32, 3, 1, rng=rng, dtype=dtype, name="trunk.conv3")
        self.relu3 = nn.ReLU()
        self.feature_shape = self.conv3.output_shape(self.conv2.output_shape((18, side1, side1)))
        self.fc1 = nn.Linear(int(np.prod(self.feature_shape)), 256, rng=rng, dtype=dtype, name="trunk.fc1")
        self.relu4 = nn.ReLU()
        self.fc2 = nn.Linear(256, ACTION_COUNT, rng=rng, dtype=dtype, name="trunk.fc2")
        self.activations = {}

    @property
    def layers(self):
        return [self.conv1, self.relu1, self.embed_broadcast, self.embed_conv, self.embed_sigmoid,
                self.concat, self.conv2, self.relu2, self.conv3, self.relu3, self.fc1, self.relu4, self.fc2]

    @property
    def dtype(self):
        return self.conv1.weight.data.dtype

    def params(self) -> list[nn.Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def named_params(self) -> list[tuple[str, nn.Tensor]]:
        return [(p.name, p) for p in self.params()]

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params())

    def freeze(self) -> None:
        for p in self.params():
            p.frozen = True

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_params():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def clone(self, dtype=None) -> "DqnNetwork":
        """Deep copy; ``dtype=np.float64`` gives the shadow network for gradient checks."""
        other = copy.deepcopy(self)
        if dtype is not None:
            for layer in other.layers:
                layer.astype(dtype)
        for layer in other.layers:
            layer._cache = None
        return other

    def load_state(self, other: "DqnNetwork") -> None:
        for p, q in zip(self.params(), other.params()):
            p.data[...] = q.data

    def forward(self, frames: np.ndarray, subgoals: np.ndarray):
        """``frames``: (N, 3, H, W) one-hot; ``subgoals``: (N, 2) normalised.

        Returns ``(q, features)`` with shapes (N, 3) and (N, 32, 4, 4).
        """
        n = self.frame_size
        if frames.ndim != 4 or frames.shape[1:] != (3, n, n):
            raise nn.ShapeError(f"DQN expects frames of shape (N, 3, {n}, {n}), got {frames.shape}")
        if subgoals.shape != (frames.shape[0], 2):
            raise nn.ShapeError(f"DQN expects sub-goal inputs of shape ({frames.shape[0]}, 2), got {subgoals.shape}")
        a1 = self.relu1(self.conv1(frames))
        emb = self.embed_sigmoid(self.embed_conv(self.embed_broadcast(subgoals)))
        a2 = self.relu2(self.conv2(self.concat(a1, emb)))
        feats = self.relu3(self.conv3(a2))
        q = self.fc2(self.relu4(self.fc1(feats)))
        self.activations = {"conv1": a1, "conv2": a2, "conv3": feats, "embedding": emb}
        return q, feats

    def backward(self, grad_q: np.ndarray, grad_features: np.ndarray | None = None):
        """Backpropagate from the Q-values; returns the sub-goal input gradient
        (and the frame gradient when conv1 has ``input_grad`` enabled)."""
        g = self.fc1.backward(self.relu4.backward(self.fc2.backward(grad_q)))
        if grad_features is not None:
            g = g + grad_features
        g = self.conv2.backward(self.relu2.backward(self.conv3.backward(self.relu3.backward(g))))
        g1, ge = self.concat.backward(g)
        g_sub = self.embed_broadcast.backward(self.embed_conv.backward(self.embed_sigmoid.backward(ge)))
        g_frames = self.conv1.backward(self.relu1.backward(g1))
        return g_sub, g_frames

    def q_values(self, frames: np.ndarray, polars, chunk: int = 256):
        """Q-values and features for raw class-index frames and
        ``(angle, distance)`` pairs, evaluated in chunks."""
        frames = np.asarray(frames)
        if frames.ndim == 2:
            frames = frames[None]
        polars = np.asarray(polars, dtype=np.float64).reshape(-1, 2)
        if len(frames) == 0:
            return np.zeros((0, ACTION_COUNT), self.dtype), np.zeros((0,) + self.feature_shape, self.dtype)
        qs, fs = [], []
        for i in range(0, len(frames), chunk):
            x = one_hot_frames(frames[i:i + chunk], self.dtype)
            s = encode_subgoals(polars[i:i + chunk, 0], polars[i:i + chunk, 1], self.d_max, self.dtype)
            q, f = self.forward(x, s)
            qs.append(q)
            fs.append(f)
        return np.concatenate(qs), np.concatenate(fs)


def forward_q(net: DqnNetwork, frame: np.ndarray, subgoal: SubGoalPolar):
    """Q-values (3,) and feature map F (32, 4, 4) for one state."""
    q, f = net.q_values(frame[None], [(subgoal.angle, subgoal.distance)])
    return q[0], f[0]


def epsilon_at(episode: int, cfg: DqnConfig = DqnConfig()) -> float:
    """Linear anneal from ``epsilon_start`` to ``epsilon_end``, then constant."""
    if episode < 0:
        raise ValueError("episode must be non-negative")
    frac = min(1.0, episode / cfg.epsilon_decay_episodes) if cfg.epsilon_decay_episodes > 0 else 1.0
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


def select_action(q, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest action index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(ACTION_COUNT))
    return int(np.argmax(q))


@dataclass
class Transition:
    state: np.ndarray
    subgoal: SubGoalPolar
    action: int
    reward: float
    next_state: np.ndarray
    next_subgoal: SubGoalPolar
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored as flat arrays."""

    def __init__(self, capacity: int, frame_shape=(64, 64)):
        self.capacity = capacity
        self.states = np.zeros((capacity,) + tuple(frame_shape), dtype=np.uint8)
        self.next_states = np.zeros_like(self.states)
        self.subgoals = np.zeros((capacity, 2))
        self.next_subgoals = np.zeros((capacity, 2))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition) -> None:
        i = self.cursor
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.subgoals[i] = (t.subgoal.angle, t.subgoal.distance)
        self.next_subgoals[i] = (t.next_subgoal.angle, t.next_subgoal.distance)
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.dones[i] = t.done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        """Uniform sample without replacement within the batch."""
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} transitions")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return {"states": self.states[idx], "subgoals": self.subgoals[idx], "actions": self.actions[idx],
                "rewards": self.rewards[idx], "next_states": self.next_states[idx],
                "next_subgoals": self.next_subgoals[idx], "dones": self.dones[idx]}


def td_targets(rewards, dones, next_q, gamma: float) -> np.ndarray:
    """``r`` for terminal transitions, else ``r + gamma * max_a Q_target(s', a)``."""
    return np.asarray(rewards, dtype=np.float64) + gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * np.max(next_q, axis=1)


class DqnTrainer:
    """Huber-loss Q-learning with a periodically synced target network."""

    def __init__(self, net: DqnNetwork, cfg: DqnConfig = DqnConfig()):
        self.net = net
        self.cfg = cfg
        self.target = net.clone()
        self.optimizer = nn.RMSProp(net.params(), cfg.lr, decay=cfg.rms_decay, eps=cfg.rms_eps)
        self.updates = 0

    def train_step(self, batch: dict) -> float:
        if self.net.frozen:
            raise nn.FrozenError("train_step on a frozen DQN")
        net, cfg = self.net, self.cfg
        next_q, _ = self.target.q_values(batch["next_states"], batch["next_subgoals"])
        if cfg.double_q:
            pick = np.argmax(net.q_values(batch["next_states"], batch["next_subgoals"])[0], axis=1)
            next_q = next_q[np.arange(len(pick)), pick][:, None]
        y = td_targets(batch["rewards"], batch["dones"], next_q, cfg.gamma)
        x = one_hot_frames(batch["states"], net.dtype)
        s = encode_subgoals(batch["subgoals"][:, 0], batch["subgoals"][:, 1], net.d_max, net.dtype)
        q, _ = net.forward(x, s)
        rows = np.arange(len(y))
        loss, g = nn.huber(q[rows, batch["actions"]], y.astype(q.dtype))
        grad_q = np.zeros_like(q)
        grad_q[rows, batch["actions"]] = g
        self.optimizer.zero_grad()
        net.backward(grad_q)
        self.optimizer.step()
        self.updates += 1
        if self.updates % cfg.target_sync == 0:
            self.target.load_state(net)
        return loss


def plan_episode(world: WorldMap, sim_cfg: SimConfig, planner_cfg: PlannerConfig, seed: int,
                 stream_name: str, index: int) -> Episode | None:
    """Sample a start pose and plan sub-goals to the map goal; ``None`` if infeasible."""
    try:
        pose = reset(world, stream(seed, stream_name + ".start", index), world.start_region, sim_cfg)
    except InfeasibleStart:
        return None
    result = plan_robot_path(pose.xy, world.goal, world, planner_cfg, stream(seed, stream_name + ".planner", index),
                             sim_cfg.robot_radius)
    if not result.feasible:
        return None
    return Episode(world, sim_cfg, pose, extract_subgoals(result.path, planner_cfg.subgoal_spacing))


def run_episode(net: DqnNetwork, episode: Episode, epsilon: float, rng: np.random.Generator,
                on_transition=None) -> Episode:
    """Drive ``episode`` to completion with an epsilon-greedy policy."""
    frame, polar = episode.observe()
    while not episode.finished:
        q, _ = forward_q(net, frame, polar)
        action = select_action(q, epsilon, rng)
        out = episode.act(action)
        next_frame, next_polar = episode.observe()
        if on_transition is not None:
            on_transition(Transition(frame, polar, action, out.reward, next_frame, next_polar, out.td_done), q)
        frame, polar = next_frame, next_polar
    return episode


def validate(net: DqnNetwork, world: WorldMap, sim_cfg: SimConfig, planner_cfg: PlannerConfig, trials: int,
             seed: int) -> tuple[int, int]:
    """Greedy ``(successes, collisions)`` on the validation starts, which are
    drawn from their own streams and never overlap the evaluation trials."""
    successes = collisions = 0
    rng = stream(seed, "validate.policy")
    for i in range(trials):
        episode = plan_episode(world, sim_cfg, planner_cfg, seed, "validate", i)
        if episode is None:
            continue
        run_episode(net, episode, 0.0, rng)
        successes += int(episode.reached_goal)
        collisions += int(episode.crashed)
    return successes, collisions


def run_training(world: WorldMap, sim_cfg: SimConfig = SimConfig(), planner_cfg: PlannerConfig = PlannerConfig(),
                 cfg: DqnConfig = DqnConfig(), seed: int = 0, episodes: int | None = None,
                 log_every: int = 100):
    """Train a DQN from scratch.  Returns ``(network, log_rows)``.

    Each log row has episode, return, steps, success, epsilon, td_loss_mean.
    Episodes whose start or plan is infeasible are logged with ``steps == 0``.
    With ``cfg.validate_every`` set, the returned weights are the snapshot
    with the best greedy validation score, successes minus collisions (ties
    go to the later snapshot).
    """
    episodes = cfg.episodes if episodes is None else episodes
    net = DqnNetwork(rng=stream(seed, "init"), frame_size=sim_cfg.frame_size, d_max=cfg.d_max)
    trainer = DqnTrainer(net, cfg)
    buffer = ReplayBuffer(cfg.buffer_capacity, (sim_cfg.frame_size, sim_cfg.frame_size))
    agent_rng = stream(seed, "agent")
    rows = []
    total_steps = 0
    best = None

    def checkpoint(done_episodes):
        nonlocal best
        wins, crashes = validate(net, world, sim_cfg, planner_cfg, cfg.validate_trials, seed)
        log.info("validation after %d episodes: %d/%d reached, %d crashed", done_episodes, wins,
                 cfg.validate_trials, crashes)
        if best is None or (wins - crashes, wins) >= best[0]:
            best = ((wins - crashes, wins), done_episodes, [p.data.copy() for p in net.params()])

    for ep in range(episodes):
        eps = epsilon_at(ep, cfg)
        if cfg.lr_final >= 0:
            trainer.optimizer.lr = cfg.lr + (cfg.lr_final - cfg.lr) * ep / max(1, episodes - 1)
        episode = plan_episode(world, sim_cfg, planner_cfg, seed, "train", ep)
        if episode is None:
            log.warning("episode %d skipped: infeasible start or plan", ep)
            rows.append({"episode": ep, "return": 0.0, "steps": 0, "success": 0, "epsilon": eps,
                         "td_loss_mean": math.nan})
            continue
        losses = []

        def on_transition(t, _q):
            nonlocal total_steps
            buffer.add(t)
            total_steps += 1
            if len(buffer) >= max(cfg.warmup, cfg.batch_size) and total_steps % cfg.train_every == 0:
                losses.append(trainer.train_step(buffer.sample(cfg.batch_size, agent_rng)))

        run_episode(net, episode, eps, agent_rng, on_transition)
        rows.append({"episode": ep, "return": episode.total_reward, "steps": episode.steps,
                     "success": int(episode.reached_goal), "epsilon": eps,
                     "td_loss_mean": float(np.mean(losses)) if losses else math.nan})
        if log_every and (ep + 1) % log_every == 0:
            recent = rows[-log_every:]
            log.info("episode %d  eps %.3f  success %.2f  return %.2f  steps %d",
                     ep + 1, eps, np.mean([r["success"] for r in recent]),
                     np.mean([r["return"] for r in recent]), total_steps)
        if cfg.validate_every and ((ep + 1) % cfg.validate_every == 0 or ep + 1 == episodes):
            checkpoint(ep + 1)
    if best is not None:
        for p, data in zip(net.params(), best[2]):
            p.data[...] = data
        log.info("keeping the snapshot from episode %d", best[1])
    return net, rows
