"""Synthetic wheelchair navigation: unicycle kinematics, 2-D range scans and labelling.

Three hand-built maps stand in for the recorded environments. Map 3 is made
of 1.2 m corridors plus one open room, so narrow reversing dominates there.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import ContractError

TICK_HZ = 10.0
DT = 1.0 / TICK_HZ
ROBOT_RADIUS = 0.5
SAFE_DISTANCE = 0.8
MAX_RANGE = 10.0
DEFAULT_BEAMS = 72

MODES = ("rotate_left", "rotate_right", "forward", "reverse", "turn_left", "turn_right")
MANOEUVRES = MODES
N_CLASSES = 2 * len(MANOEUVRES)

# labelling thresholds on window-mean commands (m/s, rad/s)
ROTATE_MAX_V = 0.05
ROTATE_MIN_W = 0.3
MOVE_MIN_V = 0.05
STRAIGHT_MAX_W = 0.15
NARROW_THREAT = 0.25

NOISE_V = 0.05
NOISE_W = 0.1
SCAN_NOISE = 0.01
MAX_PLACEMENTS = 20


class OutsideMapWarning(RuntimeWarning):
    pass


class PlacementError(RuntimeError):
    """No collision-free start pose found for an episode."""


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    w = math.remainder(float(theta), 2 * math.pi)
    return math.pi if w <= -math.pi else w


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self):
        return np.array([self.x, self.y, self.theta])


def unicycle_step(p: Pose, v, omega, dt=DT) -> Pose:
    if not dt > 0:
        raise ContractError("dt must be positive")
    return Pose(p.x + v * math.cos(p.theta) * dt,
                p.y + v * math.sin(p.theta) * dt,
                p.theta + omega * dt)


def integrate_commands(commands, start=Pose(0.0, 0.0, 0.0), dt=DT):
    """Poses (n+1, 3) reached by applying each (v, omega) row in turn."""
    poses = [start]
    for v, w in np.asarray(commands, dtype=float):
        poses.append(unicycle_step(poses[-1], v, w, dt))
    return np.array([p.as_array() for p in poses])


def constant_velocity_rollout(pose: Pose, v, omega, n, dt=DT):
    """Poses after holding the last command for n ticks (baseline forecast)."""
    return integrate_commands(np.tile([v, omega], (n, 1)), pose, dt)[1:]


# -- maps -------------------------------------------------------------------


@dataclass
class WorldMap:
    map_id: int
    width: float
    height: float
    blocks: list = field(default_factory=list)  # solid rectangles (x0, y0, x1, y1)
    walls: list = field(default_factory=list)  # thin segments (x0, y0, x1, y1)
    lanes: list = field(default_factory=list)  # corridor centrelines used for start poses
    lane_prob: float = 0.0

    def __post_init__(self):
        segs = [(0, 0, self.width, 0), (self.width, 0, self.width, self.height),
                (self.width, self.height, 0, self.height), (0, self.height, 0, 0)]
        for x0, y0, x1, y1 in self.blocks:
            segs += [(x0, y0, x1, y0), (x1, y0, x1, y1), (x1, y1, x0, y1), (x0, y1, x0, y0)]
        segs += list(self.walls)
        self.segments = np.array(segs, dtype=float)

    def in_bounds(self, x, y):
        return 0.0 <= x <= self.width and 0.0 <= y <= self.height

    def in_block(self, x, y):
        return any(x0 < x < x1 and y0 < y < y1 for x0, y0, x1, y1 in self.blocks)

    def clearance(self, x, y):
        """Distance from (x, y) to the nearest wall segment."""
        s = self.segments
        a = s[:, :2]
        d = s[:, 2:] - a
        p = np.array([x, y])
        t = np.clip(((p - a) * d).sum(1) / (d * d).sum(1), 0.0, 1.0)
        return float(np.min(np.linalg.norm(a + t[:, None] * d - p, axis=1)))

    def is_free(self, x, y, margin=0.0):
        return (self.in_bounds(x, y) and not self.in_block(x, y)
                and self.clearance(x, y) >= ROBOT_RADIUS + margin)


def build_maps():
    return {
        1: WorldMap(1, 12.0, 10.0,
                    blocks=[(3.0, 3.0, 4.5, 4.0), (8.0, 6.0, 9.5, 7.5), (2.0, 7.0, 3.0, 8.5), (7.0, 1.2, 10.8, 3.0)],
                    walls=[(6.0, 0.0, 6.0, 2.5)],
                    lanes=[(6.6, 0.6, 11.4, 0.6), (11.4, 0.6, 11.4, 3.0)], lane_prob=0.25),
        2: WorldMap(2, 14.0, 8.0, blocks=[(2.5, 2.5, 3.5, 3.5), (10.5, 5.0, 12.0, 6.0), (1.2, 5.6, 6.0, 6.8)],
                    walls=[(7.0, 0.0, 7.0, 3.2), (7.0, 4.8, 7.0, 8.0)],
                    lanes=[(0.6, 7.4, 6.4, 7.4), (0.6, 5.0, 0.6, 7.4)], lane_prob=0.25),
        3: WorldMap(3, 14.0, 8.0, blocks=[(1.2, 1.2, 9.0, 6.8), (11.0, 3.0, 12.0, 5.0)],
                    lanes=[(0.6, 0.6, 9.0, 0.6), (0.6, 7.4, 9.0, 7.4), (0.6, 0.6, 0.6, 7.4)], lane_prob=0.6),
    }


MAPS = build_maps()


# -- sensing ----------------------------------------------------------------


def raycast(p: Pose, world: WorldMap, beams=DEFAULT_BEAMS, max_range=MAX_RANGE):
    """Range to the nearest wall along ``beams`` bearings spaced evenly from the heading."""
    if beams < 1:
        raise ContractError("beam count must be >= 1")
    if not world.in_bounds(p.x, p.y):
        warnings.warn(f"pose ({p.x:.2f}, {p.y:.2f}) outside map {world.map_id}", OutsideMapWarning)
        return np.full(beams, float(max_range))
    angles = p.theta + 2 * np.pi * np.arange(beams) / beams
    d = np.stack([np.cos(angles), np.sin(angles)], 1)  # (B, 2)
    s = world.segments
    a = s[:, :2]
    e = s[:, 2:] - a  # (M, 2)
    w = a - np.array([p.x, p.y])  # (M, 2)
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]  # (B, M)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
        u = (w[None, :, 0] * d[:, None, 1] - w[None, :, 1] * d[:, None, 0]) / denom
    hit = (np.abs(denom) > 1e-12) & (t >= 0) & (u >= 0) & (u <= 1)
    t = np.where(hit, t, np.inf)
    return np.minimum(t.min(1), max_range)


def threat_score(ranges, robot_radius=ROBOT_RADIUS, safe_distance=SAFE_DISTANCE):
    """Mean saturated proximity over beams; 0 when clear, 1 when every beam is at the footprint."""
    ranges = np.asarray(ranges, dtype=float)
    if np.any(ranges < 0):
        raise ContractError("ranges must be non-negative")
    return np.clip((safe_distance + robot_radius - ranges) / safe_distance, 0.0, 1.0).mean(-1)


def classify_manoeuvre(v_mean, w_mean):
    if abs(v_mean) < ROTATE_MAX_V and abs(w_mean) > ROTATE_MIN_W:
        return MANOEUVRES.index("rotate_left" if w_mean > 0 else "rotate_right")
    if v_mean > MOVE_MIN_V and abs(w_mean) <= STRAIGHT_MAX_W:
        return MANOEUVRES.index("forward")
    if v_mean < -MOVE_MIN_V:
        return MANOEUVRES.index("reverse")
    return MANOEUVRES.index("turn_left" if w_mean >= 0 else "turn_right")


def label_window(commands, ranges):
    """(class id, manoeuvre, narrow flag) for one (T, 2) / (T, B) window."""
    commands = np.asarray(commands, dtype=float)
    v_mean, w_mean = commands.mean(0)
    manoeuvre = classify_manoeuvre(v_mean, w_mean)
    narrow = int(threat_score(ranges).mean() > NARROW_THREAT)
    return 2 * manoeuvre + narrow, manoeuvre, narrow


# -- scripted episodes -------------------------------------------------------


@dataclass
class Episode:
    map_id: int
    mode: int
    poses: np.ndarray  # (N, 3)
    commands: np.ndarray  # (N, 2) commanded (v, omega)
    ranges: np.ndarray  # (N, B)

    def __len__(self):
        return len(self.commands)


def _nominal_command(mode, rng):
    name = MODES[mode]
    if name == "forward":
        return rng.uniform(0.3, 0.6), 0.0
    if name == "reverse":
        return rng.uniform(-0.35, -0.2), 0.0
    if name in ("turn_left", "turn_right"):
        w = rng.uniform(0.35, 0.7)
        return rng.uniform(0.25, 0.45), w if name == "turn_left" else -w
    w = rng.uniform(0.5, 0.9)
    return 0.0, w if name == "rotate_left" else -w


def _sample_start(world, rng, attempts=1000):
    """A free start pose, from a corridor lane or uniformly; None if none is found."""
    if world.lanes and rng.random() < world.lane_prob:
        x0, y0, x1, y1 = world.lanes[rng.integers(len(world.lanes))]
        for _ in range(attempts):
            f = rng.uniform()
            x = x0 + f * (x1 - x0) + rng.normal(0, 0.02)
            y = y0 + f * (y1 - y0) + rng.normal(0, 0.02)
            if world.is_free(x, y):
                theta = math.atan2(y1 - y0, x1 - x0) + rng.integers(2) * np.pi + rng.normal(0, 0.02)
                return Pose(x, y, theta)
        return None
    for _ in range(attempts):
        x = rng.uniform(0, world.width)
        y = rng.uniform(0, world.height)
        if world.is_free(x, y, margin=0.05):
            if rng.random() < 0.5:
                theta = rng.integers(4) * np.pi / 2 + rng.normal(0, 0.03)
            else:
                theta = rng.uniform(-np.pi, np.pi)
            return Pose(x, y, theta)
    return None


def generate_episode(world: WorldMap, mode, rng, ticks=50, beams=DEFAULT_BEAMS, max_range=MAX_RANGE):
    """Execute a scripted behaviour mode with noisy commands from a collision-free start."""
    if isinstance(mode, str):
        mode = MODES.index(mode)
    if not 0 <= mode < len(MODES):
        raise ContractError(f"unknown mode {mode}")
    straight = MODES[mode] in ("forward", "reverse")
    for _ in range(MAX_PLACEMENTS):
        start = _sample_start(world, rng)
        if start is None:
            break
        v_nom, w_nom = _nominal_command(mode, rng)
        pose = start
        poses, commands = [], []
        ok = True
        for _ in range(ticks):
            w_cmd = w_nom + rng.normal(0, NOISE_W)
            if straight:
                # heading hold keeps straight runs inside corridors
                w_cmd += 1.0 * float(wrap_angle(start.theta - pose.theta))
            v_cmd = v_nom + rng.normal(0, NOISE_V)
            poses.append(pose)
            commands.append((v_cmd, w_cmd))
            pose = unicycle_step(pose, v_cmd, w_cmd)
            if not (world.in_bounds(pose.x, pose.y) and not world.in_block(pose.x, pose.y)
                    and world.clearance(pose.x, pose.y) >= ROBOT_RADIUS):
                ok = False
                break
        if ok:
            poses = np.array([p.as_array() for p in poses])
            ranges = np.stack([raycast(p, world, beams, max_range) for p in map(lambda a: Pose(*a), poses)])
            ranges = np.clip(ranges + rng.normal(0, SCAN_NOISE, ranges.shape), 0.0, max_range)
            return Episode(world.map_id, mode, poses, np.array(commands), ranges)
    raise PlacementError(f"no feasible start for mode {MODES[mode]} on map {world.map_id}")


MODE_WEIGHTS = {
    1: (0.2, 0.2, 0.2, 0.14, 0.13, 0.13),
    2: (0.2, 0.2, 0.2, 0.14, 0.13, 0.13),
    3: (0.14, 0.14, 0.14, 0.30, 0.14, 0.14),
}
