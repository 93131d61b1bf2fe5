"""2.5-D navigation world with a column raycaster that emits semantic frames.

Coordinates are meters, headings radians, counter-clockwise positive.  A
sub-goal angle is positive when the sub-goal lies to the robot's left.
Frames are ``(H, W)`` uint8 arrays of class indices; column 0 is the left
edge of the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

FLOOR, WALL, FURNITURE = 0, 1, 2
NUM_CLASSES = 3

FORWARD, TURN_LEFT, TURN_RIGHT = 0, 1, 2
ACTIONS = ("forward", "turn_left", "turn_right")


class MapError(ValueError):
    """Malformed or invalid world map."""


class InfeasibleStart(RuntimeError):
    """No collision-free start pose could be sampled."""


@dataclass(frozen=True)
class SimConfig:
    map_file: str = ""
    frame_size: int = 64
    fov_deg: float = 90.0
    span_scale: float = 24.0
    step_length: float = 0.2
    turn_deg: float = 15.0
    robot_radius: float = 0.25
    goal_radius: float = 0.5
    r_goal: float = 30.0
    r_crash: float = -5.0
    progress_scale: float = 1.0
    max_leg_steps: int = 300

    def __post_init__(self):
        if not self.r_goal > 0 > self.r_crash:
            raise ValueError("rewards must satisfy r_goal > 0 > r_crash")


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise MapError(f"degenerate rectangle {self}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, other: "Rect") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)


@dataclass(frozen=True)
class WorldMap:
    bounds: Rect
    furniture: tuple[Rect, ...] = ()
    start_region: Rect | None = None
    goal: tuple[float, float] | None = None

    @cached_property
    def rects(self) -> np.ndarray:
        if not self.furniture:
            return np.zeros((0, 4))
        return np.array([[r.x0, r.y0, r.x1, r.y1] for r in self.furniture], dtype=np.float64)

    def validate(self, robot_radius: float = 0.25, resolution: float = 0.05) -> None:
        """Check containment and that free space is a single connected region."""
        for r in self.furniture:
            if not self.bounds.contains(r):
                raise MapError(f"furniture {r} lies outside bounds {self.bounds}")
        b = self.bounds
        xs = np.arange(b.x0 + resolution / 2, b.x1, resolution)
        ys = np.arange(b.y0 + resolution / 2, b.y1, resolution)
        gx, gy = np.meshgrid(xs, ys)
        free = points_clear(np.stack([gx.ravel(), gy.ravel()], axis=1), self, robot_radius).reshape(gx.shape)
        _, count = ndimage.label(free)
        if count == 0:
            raise MapError("map has no free space")
        if count > 1:
            raise MapError(f"free space is split into {count} disconnected regions")
        if self.goal is not None and not points_clear(np.array([self.goal]), self, robot_radius)[0]:
            raise MapError(f"goal {self.goal} is not collision-free")


def parse_map(text: str, source: str = "<map>") -> WorldMap:
    bounds, furniture, start, goal = None, [], None, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        try:
            nums = [float(v) for v in vals]
        except ValueError:
            raise MapError(f"{source}:{lineno}: non-numeric value in {raw.strip()!r}") from None
        want = 2 if key == "goal" else 4
        if key not in ("bounds", "furniture", "start", "goal"):
            raise MapError(f"{source}:{lineno}: unknown directive {key!r}")
        if len(nums) != want:
            raise MapError(f"{source}:{lineno}: {key} takes {want} numbers, got {len(nums)}")
        try:
            if key == "bounds":
                bounds = Rect(*nums)
            elif key == "furniture":
                furniture.append(Rect(*nums))
            elif key == "start":
                start = Rect(*nums)
            else:
                goal = (nums[0], nums[1])
        except MapError as exc:
            raise MapError(f"{source}:{lineno}: {exc}") from None
    if bounds is None:
        raise MapError(f"{source}: missing 'bounds' line")
    return WorldMap(bounds, tuple(furniture), start, goal)


def load_map(path: str | Path | None = None, robot_radius: float = 0.25) -> WorldMap:
    """Load and validate a map file; ``None`` or ``""`` loads the bundled room."""
    if not path:
        text = resources.files("navexplain").joinpath("data/room.map").read_text()
        source = "room.map"
    else:
        text = Path(path).read_text()
        source = str(path)
    world = parse_map(text, source)
    world.validate(robot_radius)
    return world


# ------------------------------------------------------------ geometry


def wrap_angle(a):
    """Wrap into (-pi, pi]."""
    return a - 2 * np.pi * np.ceil((a - np.pi) / (2 * np.pi))


def _point_rect_dist(px, py, rect):
    dx = np.maximum(np.maximum(rect[0] - px, 0.0), px - rect[2])
    dy = np.maximum(np.maximum(rect[1] - py, 0.0), py - rect[3])
    return np.hypot(dx, dy)


def points_clear(points: np.ndarray, world: WorldMap, radius: float) -> np.ndarray:
    """True where a disk of ``radius`` at each point touches no obstacle."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    px, py = points[:, 0], points[:, 1]
    b = world.bounds
    ok = (px >= b.x0 + radius) & (px <= b.x1 - radius) & (py >= b.y0 + radius) & (py <= b.y1 - radius)
    if len(world.rects):
        ok &= (_point_rect_dist(px[:, None], py[:, None], world.rects.T) >= radius).all(axis=1)
    return ok


def _dist_point_rect(px, py, x0, y0, x1, y1):
    dx = max(x0 - px, 0.0, px - x1)
    dy = max(y0 - py, 0.0, py - y1)
    return math.hypot(dx, dy)


def _dist_point_segment(qx, qy, ax, ay, vx, vy, ll):
    t = 0.0 if ll == 0 else min(1.0, max(0.0, ((qx - ax) * vx + (qy - ay) * vy) / ll))
    return math.hypot(ax + t * vx - qx, ay + t * vy - qy)


def _segment_touches_rect(ax, ay, vx, vy, ll, x0, y0, x1, y1, radius) -> bool:
    if _dist_point_rect(ax, ay, x0, y0, x1, y1) < radius or _dist_point_rect(ax + vx, ay + vy, x0, y0, x1, y1) < radius:
        return True
    for cx, cy in ((x0, y0), (x1, y0), (x0, y1), (x1, y1)):
        if _dist_point_segment(cx, cy, ax, ay, vx, vy, ll) < radius:
            return True
    # Liang-Barsky clip: does the segment pass through the rectangle?
    t0, t1 = 0.0, 1.0
    for p, q in ((-vx, ax - x0), (vx, x1 - ax), (-vy, ay - y0), (vy, y1 - ay)):
        if p == 0:
            if q < 0:
                return False
        elif p < 0:
            t0 = max(t0, q / p)
        else:
            t1 = min(t1, q / p)
    return t0 <= t1


def segment_clear(ax, ay, bx, by, world: WorldMap, radius: float) -> bool:
    """Scalar version of :func:`segments_clear` for one segment."""
    b = world.bounds
    for x, y in ((ax, ay), (bx, by)):
        if not (b.x0 + radius <= x <= b.x1 - radius and b.y0 + radius <= y <= b.y1 - radius):
            return False
    vx, vy = bx - ax, by - ay
    ll = vx * vx + vy * vy
    for r in world.furniture:
        if _segment_touches_rect(ax, ay, vx, vy, ll, r.x0, r.y0, r.x1, r.y1, radius):
            return False
    return True


def segments_clear(p0: np.ndarray, p1: np.ndarray, world: WorldMap, radius: float) -> np.ndarray:
    """True where the disk swept along each segment p0->p1 touches no obstacle.

    Exact for axis-aligned rectangles: a segment either crosses the rectangle
    or its distance is attained at a segment endpoint or a rectangle corner.
    Only segment/rectangle pairs whose inflated bounding boxes overlap get the
    exact test.
    """
    p0 = np.asarray(p0, dtype=np.float64).reshape(-1, 2)
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 2)
    p0, p1 = np.broadcast_arrays(p0, p1)
    if len(p0) == 1:
        return np.array([segment_clear(p0[0, 0], p0[0, 1], p1[0, 0], p1[0, 1], world, radius)])
    b = world.bounds
    lo = np.minimum(p0, p1)
    hi = np.maximum(p0, p1)
    ok = ((lo[:, 0] >= b.x0 + radius) & (hi[:, 0] <= b.x1 - radius)
          & (lo[:, 1] >= b.y0 + radius) & (hi[:, 1] <= b.y1 - radius))
    rects = world.rects
    if len(rects) == 0:
        return ok
    near = ((lo[:, 0:1] - radius < rects[:, 2]) & (hi[:, 0:1] + radius > rects[:, 0])
            & (lo[:, 1:2] - radius < rects[:, 3]) & (hi[:, 1:2] + radius > rects[:, 1]))
    near &= ok[:, None]
    for m, ri in zip(*np.nonzero(near)):
        if not ok[m]:
            continue
        ax, ay = p0[m]
        vx, vy = p1[m] - p0[m]
        if _segment_touches_rect(ax, ay, vx, vy, vx * vx + vy * vy, *rects[ri], radius):
            ok[m] = False
    return ok


# ------------------------------------------------------------ robot


@dataclass(frozen=True)
class RobotPose:
    x: float
    y: float
    heading: float

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class SubGoalPolar:
    angle: float
    distance: float


def subgoal_polar(pose: RobotPose, subgoal_xy) -> SubGoalPolar:
    dx, dy = subgoal_xy[0] - pose.x, subgoal_xy[1] - pose.y
    return SubGoalPolar(float(wrap_angle(math.atan2(dy, dx) - pose.heading)), math.hypot(dx, dy))


def pose_valid(pose: RobotPose, world: WorldMap, radius: float) -> bool:
    return bool(points_clear(np.array([pose.xy]), world, radius)[0])


def reset(world: WorldMap, rng, start_region: Rect | None = None, cfg: SimConfig = SimConfig(),
          max_tries: int = 1000) -> RobotPose:
    """Rejection-sample a collision-free start pose with a uniform heading."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    region = start_region or world.start_region or world.bounds
    for _ in range(max_tries):
        x = rng.uniform(region.x0, region.x1)
        y = rng.uniform(region.y0, region.y1)
        heading = float(wrap_angle(rng.uniform(-np.pi, np.pi)))
        pose = RobotPose(float(x), float(y), heading)
        if pose_valid(pose, world, cfg.robot_radius):
            return pose
    raise InfeasibleStart(f"no collision-free pose in {region} after {max_tries} samples")


@dataclass(frozen=True)
class StepOutcome:
    pose: RobotPose
    reward: float
    terminal: bool
    event: str  # crash | subgoal_reached | forward | turn


def step(pose: RobotPose, action: int, subgoal_xy, world: WorldMap, cfg: SimConfig = SimConfig()) -> StepOutcome:
    """Apply one action.  Pure: the outcome depends only on the arguments.

    Precedence when several cases apply: crash, then sub-goal reached, then
    forward progress.
    """
    if action not in (FORWARD, TURN_LEFT, TURN_RIGHT):
        raise ValueError(f"invalid action {action!r}; expected 0, 1 or 2")
    gx, gy = subgoal_xy
    d_prev = math.hypot(gx - pose.x, gy - pose.y)
    if action == FORWARD:
        new = RobotPose(pose.x + cfg.step_length * math.cos(pose.heading),
                        pose.y + cfg.step_length * math.sin(pose.heading), pose.heading)
        if not segments_clear(np.array([pose.xy]), np.array([new.xy]), world, cfg.robot_radius)[0]:
            return StepOutcome(pose, cfg.r_crash, True, "crash")
    else:
        sign = 1.0 if action == TURN_LEFT else -1.0
        new = RobotPose(pose.x, pose.y, float(wrap_angle(pose.heading + sign * math.radians(cfg.turn_deg))))
    d_curr = math.hypot(gx - new.x, gy - new.y)
    if d_curr < cfg.goal_radius:
        return StepOutcome(new, cfg.r_goal, False, "subgoal_reached")
    if action == FORWARD:
        r = float(np.clip(cfg.progress_scale * (d_prev - d_curr), -1.0, 1.0))
        return StepOutcome(new, r, False, "forward")
    return StepOutcome(new, 0.0, False, "turn")


# ------------------------------------------------------------ rendering


def render(pose: RobotPose, world: WorldMap, cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Column raycast into an ``(H, W)`` class-index frame.

    Each column's hit object paints a span of height ``min(H, c / depth)``
    centred on the horizon; floor below it, wall background above.
    """
    n = cfg.frame_size
    b = world.bounds
    if not (b.x0 < pose.x < b.x1 and b.y0 < pose.y < b.y1):
        raise MapError(f"pose {pose} is outside the map bounds; rays cannot hit a wall")
    focal = (n / 2) / math.tan(math.radians(cfg.fov_deg) / 2)
    offset = (n / 2 - (np.arange(n) + 0.5)) / focal
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    # direction = forward + offset * left, so the ray parameter is the perpendicular depth
    dx = c - offset * s
    dy = s + offset * c
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_x = 1.0 / np.where(np.abs(dx) < 1e-12, 1e-12, dx)
        inv_y = 1.0 / np.where(np.abs(dy) < 1e-12, 1e-12, dy)
    tx = np.where(dx > 0, (b.x1 - pose.x) * inv_x, (b.x0 - pose.x) * inv_x)
    ty = np.where(dy > 0, (b.y1 - pose.y) * inv_y, (b.y0 - pose.y) * inv_y)
    depth = np.minimum(tx, ty)
    cls = np.full(n, WALL, dtype=np.uint8)
    for rect in world.rects:
        t1x, t2x = (rect[0] - pose.x) * inv_x, (rect[2] - pose.x) * inv_x
        t1y, t2y = (rect[1] - pose.y) * inv_y, (rect[3] - pose.y) * inv_y
        t_near = np.maximum(np.minimum(t1x, t2x), np.minimum(t1y, t2y))
        t_far = np.minimum(np.maximum(t1x, t2x), np.maximum(t1y, t2y))
        hit = (t_near <= t_far) & (t_near > 0) & (t_near < depth)
        depth = np.where(hit, t_near, depth)
        cls = np.where(hit, FURNITURE, cls).astype(np.uint8)
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise MapError(f"ray escaped the map bounds at pose {pose}")
    height = np.rint(np.minimum(n, cfg.span_scale / depth)).astype(np.int64)
    top = (n - height) // 2
    rows = np.arange(n)[:, None]
    frame = np.where(rows < top, WALL, np.where(rows < top + height, cls[None, :], FLOOR))
    return frame.astype(np.uint8)


def one_hot_frames(frames: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``(N, H, W)`` class indices -> ``(N, 3, H, W)`` one-hot floats."""
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    return (frames[:, None, :, :] == np.arange(NUM_CLASSES, dtype=frames.dtype)[None, :, None, None]).astype(dtype)


# ------------------------------------------------------------ episodes


@dataclass(frozen=True)
class EpisodeStep:
    reward: float
    td_done: bool   # bootstrapping stops (crash, or a sub-goal leg completed)
    finished: bool  # episode over
    event: str


class Episode:
    """Runs the robot through an ordered chain of sub-goals.

    Reaching a sub-goal switches the observation to the next one; reaching
    the last one ends the episode, as does a crash or exceeding
    ``max_leg_steps`` on one leg (truncation, no penalty).
    """

    def __init__(self, world: WorldMap, cfg: SimConfig, pose: RobotPose, subgoals):
        if len(subgoals) == 0:
            raise ValueError("episode needs at least one sub-goal")
        self.world = world
        self.cfg = cfg
        self.pose = pose
        self.subgoals = [tuple(map(float, g)) for g in subgoals]
        self.index = 0
        self.leg_steps = 0
        self.steps = 0
        self.finished = False
        self.crashed = False
        self.reached_goal = False
        self.total_reward = 0.0

    @property
    def goal(self):
        return self.subgoals[-1]

    @property
    def subgoal(self):
        return self.subgoals[min(self.index, len(self.subgoals) - 1)]

    def observe(self) -> tuple[np.ndarray, SubGoalPolar]:
        return render(self.pose, self.world, self.cfg), subgoal_polar(self.pose, self.subgoal)

    def distance_to_goal(self) -> float:
        return math.hypot(self.goal[0] - self.pose.x, self.goal[1] - self.pose.y)

    def act(self, action: int) -> EpisodeStep:
        if self.finished:
            raise RuntimeError("episode already finished")
        out = step(self.pose, action, self.subgoal, self.world, self.cfg)
        self.pose = out.pose
        self.steps += 1
        self.leg_steps += 1
        self.total_reward += out.reward
        event, td_done = out.event, out.terminal
        if out.event == "crash":
            self.finished = self.crashed = True
        elif out.event == "subgoal_reached":
            td_done = True
            self.leg_steps = 0
            self.index += 1
            # later sub-goals already inside the radius count as reached too
            while (self.index < len(self.subgoals)
                   and math.dist(self.pose.xy, self.subgoals[self.index]) < self.cfg.goal_radius):
                self.index += 1
            if self.index >= len(self.subgoals):
                self.finished = self.reached_goal = True
                event = "goal_reached"
        if not self.finished and self.leg_steps >= self.cfg.max_leg_steps:
            self.finished = True
            event = "timeout"
        return EpisodeStep(out.reward, td_done, self.finished, event)
