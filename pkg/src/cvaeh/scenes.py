"""Synthetic driving scenes, target-centric frames, rasters and the dataset file format.

Time runs over 30 steps at 0.2 s: indices 0..9 are the 2 s history and index
9 is t = 0; indices 10..29 are the 4 s future.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon, box
from shapely.ops import unary_union

DT = 0.2
N_PAST = 10
N_FUTURE = 20
N_STEPS = N_PAST + N_FUTURE
T0 = N_PAST - 1
TIMES = (np.arange(N_STEPS) - T0) * DT
MAX_AGENTS = 5
MAX_SPEED = 15.0
SENTINEL = 999.0
QUANTUM = 1e-4
SCHEMA = "cvaeh.episode/1"

TAGS = ("four-way", "three-way", "curve", "queue", "cruise")
FOUR_WAY_MODES = ("straight", "left", "right", "yield")

RASTER_SIZE = 64
RASTER_RES = 1.0
RASTER_HALF = RASTER_SIZE * RASTER_RES / 2
OCCUPANCY_RADIUS = 1.5


class SceneError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class MapGeometry:
    lanes: list[np.ndarray] = field(default_factory=list)
    drivable: list[np.ndarray] = field(default_factory=list)
    obstacles: list[np.ndarray] = field(default_factory=list)

    def transformed(self, fn) -> "MapGeometry":
        return MapGeometry([fn(p) for p in self.lanes], [fn(p) for p in self.drivable],
                           [fn(p) for p in self.obstacles])


@dataclass
class Episode:
    """Up to five agents' world-frame trajectories, (A, 30, 2), plus map and tag.

    ``modes`` names each agent's behaviour (for example "left" or "blocked");
    ``center`` is the reference point used to classify endpoint sectors.
    """

    tag: str
    traj: np.ndarray
    modes: tuple[str, ...]
    map: MapGeometry
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.traj = np.asarray(self.traj, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.tag not in TAGS:
            raise SceneError(f"unknown scenario tag {self.tag!r}")
        if self.traj.ndim != 3 or self.traj.shape[1:] != (N_STEPS, 2):
            raise SceneError(f"trajectories must be (agents, {N_STEPS}, 2), got {self.traj.shape}")
        if not 1 <= self.traj.shape[0] <= MAX_AGENTS:
            raise SceneError(f"episode needs 1..{MAX_AGENTS} agents, got {self.traj.shape[0]}")
        if len(self.modes) != self.traj.shape[0]:
            raise SceneError("one mode label per agent is required")
        self.modes = tuple(self.modes)

    @property
    def n_agents(self) -> int:
        return self.traj.shape[0]


@dataclass(frozen=True)
class FramePose:
    origin: tuple[float, float]
    heading: float

    def __post_init__(self):
        if not -math.pi < self.heading <= math.pi:
            raise SceneError(f"heading {self.heading} outside (-pi, pi]")


# -- geometry helpers --------------------------------------------------------

def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def wrap_angle(a: float) -> float:
    """Map to (-pi, pi]."""
    a = math.remainder(a, 2 * math.pi)
    return math.pi if a == -math.pi else a


def _quantize(a: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(a, dtype=np.float64) / QUANTUM) * QUANTUM


class PolyPath:
    """Polyline parameterised by arc length; ``s_zero`` marks the reference point."""

    def __init__(self, points: np.ndarray, s_zero: float = 0.0):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)]) - s_zero

    def at(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if s.min() < self.s[0] or s.max() > self.s[-1]:
            raise SceneError("arc length outside path")
        return np.stack([np.interp(s, self.s, self.points[:, 0]), np.interp(s, self.s, self.points[:, 1])], axis=-1)


def _arc(center, radius, a0, a1, step=0.05) -> np.ndarray:
    n = max(2, int(abs(a1 - a0) * radius / step) + 1)
    a = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], axis=1)


def _segment(p0, p1, step=1.0) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(np.linalg.norm(p1 - p0) / step) + 1)
    return p0 + np.linspace(0.0, 1.0, n)[:, None] * (p1 - p0)


def _join(*parts) -> np.ndarray:
    out = [parts[0]]
    for p in parts[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.concatenate(out)


def _ring(poly) -> np.ndarray:
    return np.asarray(poly.exterior.coords)[:-1]


# -- speed profiles (arc length vs time) ------------------------------------

def _constant(s0, v):
    return s0 + v * TIMES


def _brake_to(s0, v, s_stop):
    """Constant speed is replaced from t=0 by uniform braking to rest at ``s_stop``."""
    d = max(s_stop - s0, 0.5)
    a = v * v / (2 * d)
    t_rest = v / a
    t = np.clip(TIMES, None, t_rest)
    return np.where(TIMES <= 0, s0 + v * TIMES, s0 + v * np.maximum(t, 0) - 0.5 * a * np.maximum(t, 0) ** 2)


def _stop_and_go(s_rest, t_stop, brake, t_go, accel, v_max):
    """Roll to rest at ``t_stop``, wait, then accelerate from ``t_go`` up to ``v_max``."""
    t = TIMES
    before = s_rest - 0.5 * brake * np.clip(t_stop - t, 0, None) ** 2
    dt = np.clip(t - t_go, 0, None)
    t_cap = v_max / accel
    ramp = np.where(dt <= t_cap, 0.5 * accel * dt ** 2, 0.5 * accel * t_cap ** 2 + v_max * (dt - t_cap))
    return np.where(t < t_stop, before, s_rest + ramp)


# -- scenario generators (local frame, then a random rigid placement) ------

@dataclass(frozen=True)
class SceneConfig:
    four_way_probs: tuple[float, float, float, float] = (0.4, 0.3, 0.3, 0.0)
    tag_probs: tuple[float, ...] = (0.4, 0.15, 0.1, 0.25, 0.1)


def _four_way_path(mode: str) -> PolyPath:
    """Path for an agent approaching from the south in the right-hand lane (x = 2)."""
    entry = _segment((2.0, -150.0), (2.0, -8.0))
    if mode in ("straight", "yield"):
        body = _segment((2.0, -8.0), (2.0, 150.0))
    elif mode == "left":
        body = _join(_arc((-8.0, -8.0), 10.0, 0.0, math.pi / 2), _segment((-8.0, 2.0), (-150.0, 2.0)))
    elif mode == "right":
        body = _join(_arc((8.0, -8.0), 6.0, math.pi, math.pi / 2), _segment((8.0, -2.0), (150.0, -2.0)))
    else:
        raise SceneError(f"unknown four-way mode {mode!r}")
    return PolyPath(_join(entry, body), s_zero=142.0)


def _corner_buildings(rng) -> list[Polygon]:
    out = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            lo = 10.0 + rng.uniform(0, 2)
            hi = lo + rng.uniform(6, 14)
            xs, ys = sorted((sx * lo, sx * hi)), sorted((sy * lo, sy * hi))
            out.append(box(xs[0], ys[0], xs[1], ys[1]))
    return out


def _gen_four_way(rng, cfg: SceneConfig):
    n = int(rng.integers(2, 5))
    arms = rng.permutation(4)[:n]
    traj, modes = [], []
    probs = np.asarray(cfg.four_way_probs, float)
    for arm in arms:
        mode = FOUR_WAY_MODES[int(rng.choice(4, p=probs / probs.sum()))]
        dist = rng.uniform(12.0, 18.0)
        v = rng.uniform(6.0, 10.0)
        path = _four_way_path(mode)
        s0 = 8.0 - dist
        s = _brake_to(s0, v, -1.0 - rng.uniform(0.0, 2.0)) if mode == "yield" else _constant(s0, v)
        traj.append(path.at(s) @ _rot(arm * math.pi / 2).T)
        modes.append(mode)
    roads = [box(-150, -8, 150, 8), box(-8, -150, 8, 150)]
    lanes = [_segment((2, -150), (2, 150)), _segment((-2, 150), (-2, -150)),
             _segment((150, 2), (-150, 2)), _segment((-150, -2), (150, -2))]
    return np.stack(traj), modes, lanes, roads, _corner_buildings(rng)


def _gen_three_way(rng, cfg: SceneConfig):
    # main road along x (|y| <= 8), stem from the south (x in [-8, 8], y <= 0)
    traj, modes = [], []
    mode = ("left", "right")[int(rng.integers(2))]
    path = _four_way_path(mode)
    v = rng.uniform(6.0, 10.0)
    traj.append(path.at(_constant(8.0 - rng.uniform(12.0, 18.0), v)))
    modes.append(mode)
    for _ in range(int(rng.integers(0, 3))):
        direction = int(rng.integers(2))
        lane = _segment((-150.0, -2.0), (150.0, -2.0)) if direction == 0 else _segment((150.0, 2.0), (-150.0, 2.0))
        p = PolyPath(lane, s_zero=150.0)
        traj.append(p.at(_constant(rng.uniform(-40.0, 10.0), rng.uniform(7.0, 12.0))))
        modes.append("straight")
    roads = [box(-150, -8, 150, 8), box(-8, -150, 8, 8)]
    lanes = [_segment((2, -150), (2, -8)), _segment((-150, -2), (150, -2)), _segment((150, 2), (-150, 2))]
    obstacles = [box(-30, 10, 30, 10 + rng.uniform(6, 14))] + [
        g for g in _corner_buildings(rng) if g.bounds[1] < 0]
    return np.stack(traj), modes, lanes, roads, obstacles


def _gen_curve(rng, cfg: SceneConfig):
    radius = rng.uniform(20.0, 40.0)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    center_line = _join(_segment((-150.0, 0.0), (0.0, 0.0)), _curve_arc(radius, sign))
    end = center_line[-1]
    center_line = _join(center_line, _segment(end, end + sign * np.array([0.0, 150.0])))
    road = LineString(center_line).buffer(8.0, cap_style="flat")
    traj, modes = [], []
    n = int(rng.integers(1, 4))
    offsets = np.sort(rng.choice(np.arange(-40.0, 20.0, 14.0), size=n, replace=False))
    for off in offsets:
        lane = _offset_line(center_line, -2.0)
        p = PolyPath(lane, s_zero=150.0)
        traj.append(p.at(_constant(off, rng.uniform(6.0, 12.0))))
        modes.append("cruise")
    inner = Polygon(_arc((0.0, sign * radius), max(radius - 14.0, 3.0), 0, 2 * math.pi, step=1.0))
    obstacles = [inner] if radius > 24 else []
    return np.stack(traj), modes, [center_line], [road], obstacles


def _curve_arc(radius, sign):
    # quarter turn to the left (sign > 0) or right starting at the origin heading +x
    if sign > 0:
        return _arc((0.0, radius), radius, -math.pi / 2, 0.0)
    return _arc((0.0, -radius), radius, math.pi / 2, 0.0)


def _offset_line(points: np.ndarray, offset: float) -> np.ndarray:
    """Shift a polyline sideways; positive offsets move left of the direction of travel."""
    d = np.gradient(points, axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    normal = np.stack([-d[:, 1], d[:, 0]], axis=1)
    return points + offset * normal


def _gen_queue(rng, cfg: SceneConfig):
    n = int(rng.integers(2, 6))
    lane = _segment((-150.0, -2.0), (150.0, -2.0))
    p = PolyPath(lane, s_zero=150.0)
    traj, modes = [], []
    rest = 0.0
    t_go = rng.uniform(-0.6, 0.2)
    for i in range(n):
        t_stop = rng.uniform(-1.8, -0.8)
        if i == 0:
            t_stop = min(t_stop, t_go - 0.2)
        s = _stop_and_go(rest, t_stop, rng.uniform(1.5, 3.0), t_go, rng.uniform(1.8, 2.2), 12.0)
        traj.append(p.at(s))
        modes.append("lead" if i == 0 else "blocked")
        rest -= rng.uniform(7.0, 9.0)
        t_go += rng.uniform(4.0, 5.0)
    roads = [box(-150, -8, 150, 8)]
    obstacles = [box(-60, 10, 60, 10 + rng.uniform(4, 10)), box(-60, -10 - rng.uniform(4, 10), 60, -10)]
    return np.stack(traj), modes, [lane], roads, obstacles


def _gen_cruise(rng, cfg: SceneConfig):
    n = int(rng.integers(1, 5))
    traj, modes = [], []
    slots = {0: list(rng.permutation(np.arange(-40.0, 40.0, 16.0))), 1: list(rng.permutation(np.arange(-40.0, 40.0, 16.0)))}
    for _ in range(n):
        direction = int(rng.integers(2))
        lane = _segment((-150.0, -2.0), (150.0, -2.0)) if direction == 0 else _segment((150.0, 2.0), (-150.0, 2.0))
        p = PolyPath(lane, s_zero=150.0)
        traj.append(p.at(_constant(slots[direction].pop(), rng.uniform(8.0, 14.0))))
        modes.append("cruise")
    roads = [box(-150, -8, 150, 8)]
    return np.stack(traj), modes, [], roads, [box(-50, 12, 50, 20)]


_GENERATORS = {
    "four-way": _gen_four_way,
    "three-way": _gen_three_way,
    "curve": _gen_curve,
    "queue": _gen_queue,
    "cruise": _gen_cruise,
}


def generate_scene(tag: str, rng: np.random.Generator, cfg: SceneConfig = SceneConfig()) -> Episode:
    """One episode in world coordinates, placed with a random rotation and offset."""
    if tag not in _GENERATORS:
        raise SceneError(f"unknown scenario tag {tag!r}")
    traj, modes, lanes, roads, obstacles = _GENERATORS[tag](rng, cfg)
    theta = rng.uniform(-math.pi, math.pi)
    shift = rng.uniform(-50.0, 50.0, size=2)
    r = _rot(theta)

    def place(p):
        return _quantize(np.asarray(p) @ r.T + shift)

    drivable = unary_union(roads)
    polys = list(drivable.geoms) if hasattr(drivable, "geoms") else [drivable]
    geometry = MapGeometry([np.asarray(l) for l in lanes], [_ring(g) for g in polys], [_ring(g) for g in obstacles])
    return Episode(tag, place(traj), tuple(modes), geometry.transformed(place), place(np.zeros(2)))


def episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(b"scenes"), index])


def generate_dataset(n: int, seed: int, cfg: SceneConfig = SceneConfig()) -> list[Episode]:
    """Episode i depends only on (seed, i), so any slice can be regenerated independently."""
    probs = np.asarray(cfg.tag_probs, float)
    probs = probs / probs.sum()
    out = []
    for i in range(n):
        rng = episode_rng(seed, i)
        tag = TAGS[int(rng.choice(len(TAGS), p=probs))]
        out.append(generate_scene(tag, rng, cfg))
    return out


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, zlib.crc32(b"split")]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])


# -- frames -----------------------------------------------------------------

def heading_at_t0(track: np.ndarray, min_speed: float = 0.1) -> float:
    """Backward-difference heading at t = 0, falling back to the last moving step."""
    for i in range(T0, 0, -1):
        d = track[i] - track[i - 1]
        if np.hypot(*d) / DT >= min_speed:
            return wrap_angle(math.atan2(d[1], d[0]))
    return 0.0


def pose_of(episode: Episode, k: int) -> FramePose:
    if not 0 <= k < episode.n_agents:
        raise SceneError(f"agent {k} not present (episode has {episode.n_agents})")
    track = episode.traj[k]
    return FramePose((float(track[T0, 0]), float(track[T0, 1])), heading_at_t0(track))


def world_to_frame(points, pose: FramePose) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - np.asarray(pose.origin)) @ _rot(-pose.heading).T


def frame_to_world(points, pose: FramePose) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ _rot(pose.heading).T + np.asarray(pose.origin)


def to_target_centric(episode: Episode, k: int) -> tuple[Episode, FramePose]:
    pose = pose_of(episode, k)
    fn = lambda p: world_to_frame(p, pose)
    return Episode(episode.tag, fn(episode.traj), episode.modes, episode.map.transformed(fn), fn(episode.center)), pose


def from_target_centric(episode: Episode, pose: FramePose) -> Episode:
    fn = lambda p: frame_to_world(p, pose)
    return Episode(episode.tag, fn(episode.traj), episode.modes, episode.map.transformed(fn), fn(episode.center))


# -- raster -----------------------------------------------------------------

def raster_cell_centers() -> tuple[np.ndarray, np.ndarray]:
    c = -RASTER_HALF + RASTER_RES * (np.arange(RASTER_SIZE) + 0.5)
    return np.meshgrid(c, c, indexing="xy")


def _mask(polygons: Sequence[np.ndarray], xs, ys) -> np.ndarray:
    if not polygons:
        return np.zeros(xs.shape, dtype=bool)
    geom = unary_union([Polygon(p) for p in polygons])
    return shapely.contains_xy(geom, xs, ys)


def rasterize(episode: Episode) -> np.ndarray:
    """(64, 64, 3) uint8 raster, row i spans y in [-32 + i, -31 + i), column j likewise in x.

    Channels: drivable area, static obstacles, agents occupying the cell at
    t = 0 (cell centre within 1.5 m of an agent position).
    """
    xs, ys = raster_cell_centers()
    out = np.zeros((RASTER_SIZE, RASTER_SIZE, 3), dtype=np.uint8)
    out[..., 0] = _mask(episode.map.drivable, xs, ys)
    out[..., 1] = _mask(episode.map.obstacles, xs, ys)
    pos = episode.traj[:, T0]
    d2 = (xs[..., None] - pos[:, 0]) ** 2 + (ys[..., None] - pos[:, 1]) ** 2
    out[..., 2] = np.any(d2 <= OCCUPANCY_RADIUS ** 2, axis=-1)
    return out


# -- training instances --------------------------------------------------------

@dataclass
class Instance:
    """One target-centric example: the target sits in slot 0 of ``history``."""

    history: np.ndarray  # (5, 10, 2), absent slots at SENTINEL
    mask: np.ndarray  # (5,) 1.0 for present agents
    future: np.ndarray  # (20, 2)
    raster: np.ndarray  # (64, 64, 3) uint8
    mode: str
    tag: str
    center: np.ndarray
    pose: FramePose
    episode_index: int = -1
    agent_index: int = -1


def make_instances(episode: Episode, episode_index: int = -1) -> list[Instance]:
    """One instance per present agent."""
    out = []
    for k in range(episode.n_agents):
        local, pose = to_target_centric(episode, k)
        order = [k] + [j for j in range(episode.n_agents) if j != k]
        hist = np.full((MAX_AGENTS, N_PAST, 2), SENTINEL)
        mask = np.zeros(MAX_AGENTS)
        for slot, j in enumerate(order):
            hist[slot] = local.traj[j, :N_PAST]
            mask[slot] = 1.0
        out.append(Instance(hist, mask, local.traj[k, N_PAST:].copy(), rasterize(local), episode.modes[k],
                            episode.tag, local.center, pose, episode_index, k))
    return out


def classify_endpoint(endpoint, center) -> str:
    """Sector of the endpoint around the scene centre, in the target's frame."""
    v = np.asarray(endpoint, float) - np.asarray(center, float)
    ang = math.degrees(math.atan2(v[1], v[0]))
    if abs(ang) < 45.0:
        return "straight"
    if 45.0 <= ang <= 135.0:
        return "left"
    if -135.0 <= ang <= -45.0:
        return "right"
    return "yield"


# -- persistence ------------------------------------------------------------------
#
# One JSON object per line:
#   {"schema": "cvaeh.episode/1", "tag": str, "modes": [str],
#    "traj": [[[x, y] x 30] per agent], "center": [x, y],
#    "map": {"lanes": [...], "drivable": [...], "obstacles": [...]}}
# Every coordinate is an integer count of 1e-4 m.

def _to_int(a) -> list:
    return np.rint(np.asarray(a, dtype=np.float64) / QUANTUM).astype(np.int64).tolist()


def _from_int(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64) * QUANTUM


def episode_to_record(ep: Episode) -> dict:
    return {
        "schema": SCHEMA,
        "tag": ep.tag,
        "modes": list(ep.modes),
        "traj": _to_int(ep.traj),
        "center": _to_int(ep.center),
        "map": {key: [_to_int(p) for p in getattr(ep.map, key)] for key in ("lanes", "drivable", "obstacles")},
    }


def episode_from_record(rec: dict) -> Episode:
    if rec.get("schema") != SCHEMA:
        raise DatasetError(f"unsupported schema {rec.get('schema')!r} (expected {SCHEMA})")
    m = rec["map"]
    geometry = MapGeometry(*[[_from_int(p).reshape(-1, 2) for p in m[key]] for key in ("lanes", "drivable", "obstacles")])
    return Episode(rec["tag"], _from_int(rec["traj"]), tuple(rec["modes"]), geometry, _from_int(rec["center"]))


def quantized(ep: Episode) -> Episode:
    return episode_from_record(episode_to_record(ep))


def save_dataset(episodes: Iterable[Episode], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_record(ep), separators=(",", ":")))
            fh.write("\n")
    os.replace(tmp, path)


def load_dataset(path: str | os.PathLike) -> list[Episode]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(episode_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return out
