"""RRT* global planner and sub-goal extraction."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .sim import WorldMap, points_clear, segments_clear


@dataclass(frozen=True)
class PlannerConfig:
    max_iterations: int = 800
    step: float = 0.5
    goal_bias: float = 0.05
    goal_tolerance: float = 0.3
    gamma_rrt: float = 0.0  # 0 selects 2*sqrt(1.5*area/pi)
    subgoal_spacing: float = 1.5
    clearance: float = 0.2  # extra margin over the robot radius when planning robot paths

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("steer step must be positive")
        if not 0.0 <= self.goal_bias < 1.0:
            raise ValueError("goal bias must be in [0, 1)")
        if self.clearance < 0:
            raise ValueError("clearance must be non-negative")


class PlanTree:
    """Growing RRT* tree stored in preallocated arrays."""

    def __init__(self, root, capacity: int):
        self.nodes = np.empty((capacity, 2))
        # contiguous coordinate copies for fast distance scans
        self.xs = np.empty(capacity)
        self.ys = np.empty(capacity)
        self.parent = np.full(capacity, -1, dtype=np.int64)
        self.cost = np.zeros(capacity)
        self.children: list[set[int]] = [set() for _ in range(capacity)]
        self.nodes[0] = root
        self.xs[0], self.ys[0] = root
        self.size = 1

    def add(self, xy, parent: int, cost: float) -> int:
        i = self.size
        self.nodes[i] = xy
        self.xs[i], self.ys[i] = xy
        self.parent[i] = parent
        self.cost[i] = cost
        self.children[parent].add(i)
        self.size += 1
        return i

    def reparent(self, i: int, new_parent: int, new_cost: float) -> None:
        self.children[self.parent[i]].discard(i)
        self.parent[i] = new_parent
        self.children[new_parent].add(i)
        delta = new_cost - self.cost[i]
        queue = deque([i])
        while queue:
            j = queue.popleft()
            self.cost[j] += delta
            queue.extend(self.children[j])

    def path_to(self, i: int) -> list[tuple[float, float]]:
        out = []
        while i >= 0:
            out.append((float(self.nodes[i, 0]), float(self.nodes[i, 1])))
            i = int(self.parent[i])
        return out[::-1]

    def recomputed_costs(self) -> np.ndarray:
        """Cost-to-come recomputed from parent links (for consistency audits)."""
        n = self.size
        out = np.full(n, np.nan)
        out[0] = 0.0
        for i in range(1, n):
            chain = []
            j = i
            while np.isnan(out[j]):
                chain.append(j)
                j = int(self.parent[j])
                if len(chain) > n:
                    raise RuntimeError("cycle in parent links")
            for k in reversed(chain):
                p = self.parent[k]
                out[k] = out[p] + math.dist(self.nodes[k], self.nodes[p])
        return out


@dataclass
class PlanResult:
    path: list[tuple[float, float]] | None
    cost: float
    tree: PlanTree
    iterations: int

    @property
    def feasible(self) -> bool:
        return self.path is not None


def plan(start, goal, world: WorldMap, cfg: PlannerConfig = PlannerConfig(), rng=None,
         radius: float = 0.25, callback=None) -> PlanResult:
    """Run RRT* from ``start`` towards ``goal``.

    Returns an infeasible result (``path is None``) when no node gets within
    the goal tolerance.  ``callback(iteration, tree, best_cost)`` is invoked
    after every iteration.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    tree = PlanTree(start, cfg.max_iterations + 1)
    if not points_clear(np.stack([start, goal]), world, radius).all():
        raise ValueError("start and goal must be collision-free")
    if math.dist(start, goal) == 0.0:
        return PlanResult([tuple(map(float, start))], 0.0, tree, 0)

    b = world.bounds
    gamma = cfg.gamma_rrt or 2.0 * math.sqrt(1.5 * b.area / math.pi)
    candidates: list[int] = []
    goal_gaps: list[float] = []

    def consider(i):
        d = math.dist(tree.nodes[i], goal)
        if d <= cfg.goal_tolerance and (d == 0.0 or segments_clear(tree.nodes[i], goal, world, radius)[0]):
            candidates.append(i)
            goal_gaps.append(d)

    def best():
        if not candidates:
            return -1, math.inf
        totals = tree.cost[candidates] + np.asarray(goal_gaps)
        k = int(np.argmin(totals))
        return candidates[k], float(totals[k])

    for it in range(cfg.max_iterations):
        if rng.random() < cfg.goal_bias:
            q = goal
        else:
            q = np.array([rng.uniform(b.x0, b.x1), rng.uniform(b.y0, b.y1)])
        n = tree.size
        nodes = tree.nodes[:n]
        xs, ys = tree.xs[:n], tree.ys[:n]
        d2 = (xs - q[0]) ** 2 + (ys - q[1]) ** 2
        nearest = int(np.argmin(d2))
        dist = math.sqrt(d2[nearest])
        if dist > 1e-12:
            new = q if dist <= cfg.step else nodes[nearest] + (q - nodes[nearest]) * (cfg.step / dist)
            if segments_clear(nodes[nearest], new, world, radius)[0]:
                r = min(gamma * math.sqrt(math.log(n) / n), cfg.step) if n > 1 else 0.0
                dn = np.sqrt((xs - new[0]) ** 2 + (ys - new[1]) ** 2)
                near = np.flatnonzero(dn <= r)
                if nearest not in near:
                    near = np.append(near, nearest)
                clear = segments_clear(nodes[near], new, world, radius)
                clear[near == nearest] = True
                via = tree.cost[near] + dn[near]
                via[~clear] = np.inf
                k = int(np.argmin(via))
                new_i = tree.add(new, int(near[k]), float(via[k]))
                c_new = tree.cost[new_i]
                for j, dj, ok in zip(near, dn[near], clear):
                    if ok and j != tree.parent[new_i] and c_new + dj < tree.cost[j] - 1e-12:
                        tree.reparent(int(j), new_i, c_new + dj)
                consider(new_i)
        if callback is not None:
            callback(it, tree, best()[1])

    best_node, best_cost = best()
    if best_node < 0:
        return PlanResult(None, math.inf, tree, cfg.max_iterations)
    path = tree.path_to(best_node)
    if math.dist(path[-1], goal) > 0.0:
        path.append((float(goal[0]), float(goal[1])))
    return PlanResult(path, float(best_cost), tree, cfg.max_iterations)


def plan_robot_path(start, goal, world: WorldMap, cfg: PlannerConfig, rng, robot_radius: float) -> PlanResult:
    """Plan with obstacles inflated by ``robot_radius + cfg.clearance``.

    Falls back to the bare robot radius when an endpoint sits inside the
    margin or the inflated free space has no route.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if cfg.clearance > 0:
        wide = robot_radius + cfg.clearance
        if points_clear(np.array([start, goal], dtype=np.float64), world, wide).all():
            result = plan(start, goal, world, cfg, rng=rng, radius=wide)
            if result.feasible:
                return result
    return plan(start, goal, world, cfg, rng=rng, radius=robot_radius)


def path_length(path) -> float:
    return float(sum(math.dist(a, b) for a, b in zip(path, path[1:])))


def extract_subgoals(path, spacing: float) -> list[tuple[float, float]]:
    """Resample a polyline every ``spacing`` meters of arc length.

    The final point of the path is always the last sub-goal; the start is
    never included.
    """
    if spacing <= 0:
        raise ValueError("sub-goal spacing must be positive")
    if not path:
        raise ValueError("path is empty")
    pts = np.asarray(path, dtype=np.float64)
    seg = np.sqrt((np.diff(pts, axis=0) ** 2).sum(axis=1))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    targets = []
    k = 1
    while k * spacing < total - 1e-9:
        targets.append(k * spacing)
        k += 1
    out = [(float(np.interp(t, arc, pts[:, 0])), float(np.interp(t, arc, pts[:, 1]))) for t in targets]
    out.append((float(pts[-1, 0]), float(pts[-1, 1])))
    return out


def dump_plan(result: PlanResult) -> str:
    """Plain-text dump: one ``node x y parent_x parent_y`` line per tree edge,
    then ``path x y`` lines."""
    t = result.tree
    lines = [f"# nodes {t.size} cost {result.cost:.6f}"]
    for i in range(1, t.size):
        p = t.parent[i]
        lines.append(f"node {t.nodes[i, 0]:.6f} {t.nodes[i, 1]:.6f} {t.nodes[p, 0]:.6f} {t.nodes[p, 1]:.6f}")
    for x, y in result.path or []:
        lines.append(f"path {x:.6f} {y:.6f}")
    return "\n".join(lines) + "\n"
