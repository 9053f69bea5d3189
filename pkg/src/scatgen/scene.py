"""Procedural V2V scenes, LiDAR ray casting and a single-bounce specular scatterer oracle.

Geometry is a set of oriented boxes (yaw about +z) standing on the ground plane z = 0.
All functions are pure given their arguments; randomness flows from explicit seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .preprocess import VRParams, vr_mask

TEMPLATES = ("crossroad", "forking_road", "wide_lane")
VTD_LEVELS = ("high", "low")
BOX_KINDS = ("building", "vehicle", "tree")

# (template, vtd) -> number of vehicles. wide_lane values are our own defaults.
VEHICLE_COUNTS = {
    ("crossroad", "high"): 20,
    ("crossroad", "low"): 12,
    ("forking_road", "high"): 15,
    ("forking_road", "low"): 8,
    ("wide_lane", "high"): 24,
    ("wide_lane", "low"): 12,
}

# Anchor points of the path-length pruning factor; L_max = factor(f_c) * D_T, clipped to the VR bound.
PATH_FACTOR_ANCHORS = ((5.9e9, 2.0), (28e9, 1.3))

_EPS = 1e-9


def _wrap_angle(a: float) -> float:
    """Map an angle into [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    yaw: float = 0.0
    kind: str = "building"

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "half_extents", tuple(float(v) for v in self.half_extents))
        object.__setattr__(self, "yaw", _wrap_angle(float(self.yaw)))
        if len(self.center) != 3 or len(self.half_extents) != 3:
            raise ValueError("box center and half_extents must be 3-vectors")
        if min(self.half_extents) <= 0:
            raise ValueError(f"box half_extents must be strictly positive, got {self.half_extents}")
        if self.kind not in BOX_KINDS:
            raise ValueError(f"unknown box kind {self.kind!r}")


class BoxArray:
    """Column-wise view of a list of boxes for vectorized intersection tests."""

    def __init__(self, boxes):
        self.boxes = list(boxes)
        n = len(self.boxes)
        self.centers = np.array([b.center for b in self.boxes], dtype=np.float64).reshape(n, 3)
        self.half = np.array([b.half_extents for b in self.boxes], dtype=np.float64).reshape(n, 3)
        yaw = np.array([b.yaw for b in self.boxes], dtype=np.float64)
        self.cos = np.cos(yaw)
        self.sin = np.sin(yaw)

    def __len__(self):
        return len(self.boxes)

    def to_local(self, k: int, p: np.ndarray) -> np.ndarray:
        """World points (..., 3) into box k's local frame."""
        d = p - self.centers[k]
        c, s = self.cos[k], self.sin[k]
        out = np.empty_like(d)
        out[..., 0] = c * d[..., 0] + s * d[..., 1]
        out[..., 1] = -s * d[..., 0] + c * d[..., 1]
        out[..., 2] = d[..., 2]
        return out

    def rotate_to_local(self, k: int, v: np.ndarray) -> np.ndarray:
        c, s = self.cos[k], self.sin[k]
        out = np.empty_like(v)
        out[..., 0] = c * v[..., 0] + s * v[..., 1]
        out[..., 1] = -s * v[..., 0] + c * v[..., 1]
        out[..., 2] = v[..., 2]
        return out

    def face_frames(self):
        """Per-face outward normals, plane points and (box index, axis) for all 6 faces of every box."""
        normals, points, index = [], [], []
        for k in range(len(self)):
            c, s = self.cos[k], self.sin[k]
            axes = (np.array([c, s, 0.0]), np.array([-s, c, 0.0]), np.array([0.0, 0.0, 1.0]))
            for a in range(3):
                for sign in (1.0, -1.0):
                    n = sign * axes[a]
                    normals.append(n)
                    points.append(self.centers[k] + n * self.half[k, a])
                    index.append((k, a))
        return np.array(normals).reshape(-1, 3), np.array(points).reshape(-1, 3), index


def _slab_hits(o: np.ndarray, d: np.ndarray, half: np.ndarray):
    """Entry/exit parameters of rays o + t d against an axis-aligned box centred at the origin."""
    d = np.where(d == 0.0, 1e-300, d)
    inv = 1.0 / d
    with np.errstate(over="ignore", invalid="ignore"):
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t_near = np.minimum(t1, t2).max(axis=-1)
    t_far = np.maximum(t1, t2).min(axis=-1)
    return t_near, t_far


def cast_rays(origin, directions, boxes: BoxArray, max_range: float, exclude=(), ground: bool = True):
    """First-hit distance of unit rays from a single origin.

    Returns (t, hit_index) where hit_index is the box index, -1 for the ground and -2 for a
    miss (t = inf). Hits beyond ``max_range`` are misses.
    """
    origin = np.asarray(origin, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    n = directions.shape[0]
    t_best = np.full(n, np.inf)
    idx = np.full(n, -2, dtype=np.int64)
    if ground and origin[2] > 0:
        dz = directions[:, 2]
        down = dz < 0
        tg = np.full(n, np.inf)
        tg[down] = -origin[2] / dz[down]
        better = tg < t_best
        t_best[better] = tg[better]
        idx[better] = -1
    excluded = set(exclude)
    for k in range(len(boxes)):
        if k in excluded:
            continue
        o = boxes.to_local(k, origin[None, :])
        d = boxes.rotate_to_local(k, directions)
        t_near, t_far = _slab_hits(o, d, boxes.half[k])
        hit = (t_near <= t_far) & (t_near > _EPS) & (t_near < t_best)
        t_best[hit] = t_near[hit]
        idx[hit] = k
    miss = t_best > max_range
    t_best[miss] = np.inf
    idx[miss] = -2
    return t_best, idx


def segments_blocked(starts: np.ndarray, ends: np.ndarray, boxes: BoxArray, exclude_per_segment=None,
                     exclude=()) -> np.ndarray:
    """True where the open segment start->end passes through any box."""
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    ends = np.atleast_2d(np.asarray(ends, dtype=np.float64))
    m = starts.shape[0]
    blocked = np.zeros(m, dtype=bool)
    if m == 0:
        return blocked
    d = ends - starts
    excluded = set(exclude)
    own = np.full(m, -1) if exclude_per_segment is None else np.asarray(exclude_per_segment)
    for k in range(len(boxes)):
        if k in excluded:
            continue
        o = boxes.to_local(k, starts)
        dl = boxes.rotate_to_local(k, d)
        t_near, t_far = _slab_hits(o, dl, boxes.half[k])
        t0 = np.maximum(t_near, 0.0)
        t1 = np.minimum(t_far, 1.0)
        hit = (t0 < t1 - 1e-9) & (own != k)
        blocked |= hit
    return blocked


# --------------------------------------------------------------------------- scene layout


@dataclass(frozen=True)
class Road:
    start: tuple[float, float]
    end: tuple[float, float]
    half_width: float
    lanes: tuple[tuple[float, int], ...]  # (lateral offset, +1 forward / -1 backward)

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)

    @property
    def direction(self) -> np.ndarray:
        return (np.subtract(self.end, self.start)) / self.length

    @property
    def normal(self) -> np.ndarray:
        d = self.direction
        return np.array([-d[1], d[0]])

    def lane_line(self, lane: int):
        offset, sense = self.lanes[lane]
        a = np.asarray(self.start) + self.normal * offset
        b = np.asarray(self.end) + self.normal * offset
        return (a, b) if sense > 0 else (b, a)


@dataclass(frozen=True)
class Track:
    """Straight waypoint track: constant speed from ``start`` to ``end``, then parked."""

    start: tuple[float, float]
    end: tuple[float, float]
    speed: float
    road: int = 0

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)

    @property
    def duration(self) -> float:
        return self.length / self.speed

    @property
    def yaw(self) -> float:
        return _wrap_angle(math.atan2(self.end[1] - self.start[1], self.end[0] - self.start[0]))

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        s = np.minimum(self.speed * t, self.length)
        d = (np.subtract(self.end, self.start)) / self.length
        return np.asarray(self.start)[None, :] + s.reshape(-1, 1) * d[None, :]


@dataclass
class SceneConfig:
    template: str = "crossroad"
    vtd: str = "high"
    vehicle_count: int | None = None
    building_boxes: list | None = None
    snapshot_count: int = 100
    seed: int = 0
    n_links: int = 6
    dt: float = 0.1
    antenna_height: float = 1.6
    vehicle_size: tuple[float, float, float] = (4.5, 1.8, 1.5)
    allow_count_override: bool = False

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")
        if self.vtd not in VTD_LEVELS:
            raise ValueError(f"unknown vtd {self.vtd!r}")
        default = VEHICLE_COUNTS[(self.template, self.vtd)]
        if self.vehicle_count is None:
            self.vehicle_count = default
        elif self.vehicle_count != default and not self.allow_count_override:
            raise ValueError(
                f"vehicle_count {self.vehicle_count} inconsistent with ({self.template}, {self.vtd}); "
                f"expected {default} (set allow_count_override to force)"
            )
        if self.snapshot_count < 1:
            raise ValueError("snapshot_count must be >= 1")
        if self.vehicle_count < 2:
            raise ValueError("at least two vehicles are needed to form a link")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if d.get("building_boxes") is not None:
            d["building_boxes"] = [Box(**b) for b in d["building_boxes"]]
        if "vehicle_size" in d:
            d["vehicle_size"] = tuple(d["vehicle_size"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if self.building_boxes is not None:
            out["building_boxes"] = [
                {"center": list(b.center), "half_extents": list(b.half_extents), "yaw": b.yaw, "kind": b.kind}
                for b in self.building_boxes
            ]
        out["vehicle_size"] = list(self.vehicle_size)
        return out


@dataclass
class Scene:
    config: SceneConfig
    roads: list[Road]
    static_boxes: list[Box]
    tracks: list[Track]
    links: list[tuple[int, int]]
    bounds: tuple[float, float, float, float]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.config.snapshot_count) * self.config.dt


@dataclass
class Snapshot:
    index: int
    time: float
    vehicle_poses: list[tuple[np.ndarray, float]]
    tx_pose: np.ndarray
    rx_pose: np.ndarray
    link: int = 0
    tx_vehicle: int = 0
    rx_vehicle: int = 1
    vehicle_size: tuple[float, float, float] = (4.5, 1.8, 1.5)
    antenna_height: float = 1.6

    def vehicle_boxes(self) -> list[Box]:
        L, W, H = self.vehicle_size
        return [
            Box((p[0], p[1], H / 2.0), (L / 2.0, W / 2.0, H / 2.0), yaw, "vehicle")
            for p, yaw in self.vehicle_poses
        ]

    def mount(self, vehicle: int) -> np.ndarray:
        p, _ = self.vehicle_poses[vehicle]
        return np.array([p[0], p[1], self.antenna_height])


_LAYOUT = {
    # width, gap, depth, height, setback, yaw jitter, sidewalk, tree spacing
    "crossroad": dict(width=(8, 22), gap=(0.5, 3), depth=(10, 25), height=(10, 40), setback=(0, 0.6),
                      jitter=0.03, sidewalk=4.0, trees=(14, 24)),
    "forking_road": dict(width=(8, 16), gap=(10, 35), depth=(8, 14), height=(4, 10), setback=(0, 3),
                         jitter=0.05, sidewalk=5.0, trees=(10, 18)),
    "wide_lane": dict(width=(10, 25), gap=(1, 5), depth=(12, 25), height=(10, 30), setback=(0, 0.6),
                      jitter=0.03, sidewalk=5.0, trees=(10, 16)),
}
_EXTENT = 120.0
_ROAD_EXTENT = 110.0


def _roads_for(template: str) -> list[Road]:
    R = _ROAD_EXTENT
    if template == "crossroad":
        lanes = ((-7.5, 1), (-2.5, 1), (2.5, -1), (7.5, -1))
        return [Road((-R, 0.0), (R, 0.0), 10.0, lanes), Road((0.0, -R), (0.0, R), 10.0, lanes)]
    if template == "forking_road":
        a = math.radians(25.0)
        main = Road((-R, 0.0), (0.0, 0.0), 8.0, ((-6.0, 1), (-2.0, 1), (2.0, -1), (6.0, -1)))
        branches = [
            Road((0.0, 0.0), (R * math.cos(s * a), R * math.sin(s * a)), 6.0, ((-3.0, 1), (3.0, -1)))
            for s in (1.0, -1.0)
        ]
        return [main, *branches]
    lanes = tuple((-15.75 + 4.5 * i, 1) for i in range(4)) + tuple((2.25 + 4.5 * i, -1) for i in range(4))
    return [Road((-R, 0.0), (R, 0.0), 18.0, lanes)]


def _rect_corners(cx, cy, hx, hy, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    ex, ey = np.array([c, s]), np.array([-s, c])
    ctr = np.array([cx, cy])
    return np.array([ctr + sx * hx * ex + sy * hy * ey for sx, sy in ((1, 1), (1, -1), (-1, -1), (-1, 1))])


def _rects_overlap(a, b) -> bool:
    """Separating-axis test for two convex quads given as (4, 2) corner arrays."""
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def _road_rect(road: Road, margin: float):
    mid = (np.asarray(road.start) + np.asarray(road.end)) / 2.0
    yaw = math.atan2(road.direction[1], road.direction[0])
    return _rect_corners(mid[0], mid[1], road.length / 2.0 + margin, road.half_width + margin, yaw)


def _place_static(template: str, roads: list[Road], rng: np.random.Generator) -> list[Box]:
    p = _LAYOUT[template]
    road_rects = [_road_rect(r, p["sidewalk"]) for r in roads]
    road_only = [_road_rect(r, 0.5) for r in roads]
    footprints: list[np.ndarray] = []
    boxes: list[Box] = []

    def free(rect, keep_out):
        return not any(_rects_overlap(rect, q) for q in keep_out) and not any(
            _rects_overlap(rect, q) for q in footprints
        )

    for road in roads:
        d, n = road.direction, road.normal
        road_yaw = math.atan2(d[1], d[0])
        for side in (1.0, -1.0):
            s = -_EXTENT
            while s < _EXTENT + road.length:
                w = rng.uniform(*p["width"])
                depth = rng.uniform(*p["depth"])
                h = rng.uniform(*p["height"])
                setback = rng.uniform(*p["setback"])
                yaw = road_yaw + rng.uniform(-p["jitter"], p["jitter"])
                gap = rng.uniform(*p["gap"])
                along = s + w / 2.0
                lateral = side * (road.half_width + p["sidewalk"] + setback + depth / 2.0)
                ctr = np.asarray(road.start) + d * along + n * lateral
                s += w + gap
                if max(abs(ctr[0]), abs(ctr[1])) > _EXTENT:
                    continue
                rect = _rect_corners(ctr[0], ctr[1], w / 2.0, depth / 2.0, yaw)
                if free(rect, road_rects):
                    footprints.append(rect)
                    boxes.append(Box((ctr[0], ctr[1], h / 2.0), (w / 2.0, depth / 2.0, h / 2.0), yaw, "building"))
    for road in roads:
        d, n = road.direction, road.normal
        for side in (1.0, -1.0):
            s = rng.uniform(0.0, p["trees"][0])
            while s < road.length:
                ctr = np.asarray(road.start) + d * s + n * side * (road.half_width + p["sidewalk"] / 2.0)
                s += rng.uniform(*p["trees"])
                rect = _rect_corners(ctr[0], ctr[1], 1.0, 1.0, 0.0)
                if free(rect, road_only):
                    footprints.append(rect)
                    boxes.append(Box((ctr[0], ctr[1], 4.5), (1.2, 1.2, 1.75), 0.0, "tree"))
    return boxes


def _place_vehicles(cfg: SceneConfig, roads: list[Road], rng: np.random.Generator) -> list[Track]:
    lanes = [(i, r, k) for i, r in enumerate(roads) for k in range(len(r.lanes))]
    times = np.arange(cfg.snapshot_count) * cfg.dt
    L = cfg.vehicle_size[0]
    clearance = L + 0.5
    tracks: list[Track] = []
    paths: list[np.ndarray] = []
    for _ in range(cfg.vehicle_count):
        for _attempt in range(2000):
            road_id, road, k = lanes[rng.integers(len(lanes))]
            a, b = road.lane_line(k)
            lane_len = float(np.linalg.norm(b - a))
            u = (b - a) / lane_len
            s0 = rng.uniform(0.15, 0.75) * lane_len
            speed = float(rng.uniform(4.0, 14.0))
            travel = rng.uniform(0.3, 1.0) * (lane_len - s0 - L)
            if any(abs(speed - t.speed) < 0.05 for t in tracks) or travel <= 1.0:
                continue
            track = Track(tuple(a + u * s0), tuple(a + u * (s0 + travel)), speed, road_id)
            path = track.position(times)
            if all(np.min(np.linalg.norm(path - q, axis=1)) >= clearance for q in paths):
                tracks.append(track)
                paths.append(path)
                break
        else:
            raise RuntimeError("could not place a collision-free vehicle track; reduce vehicle_count or snapshots")
    return tracks


def _choose_links(cfg: SceneConfig, tracks: list[Track], rng: np.random.Generator) -> list[tuple[int, int]]:
    pos = np.array([t.position(0.0)[0] for t in tracks])
    n = len(tracks)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    # same-road pairs in a typical V2V range first, then progressively looser
    passes = [(True, 30.0, 80.0), (True, 10.0, 100.0), (False, 10.0, 100.0), (False, 0.5, np.inf)]
    for same_road, lo, hi in passes:
        cand = [
            (i, j) for i, j in pairs
            if lo <= np.linalg.norm(pos[i] - pos[j]) <= hi and (not same_road or tracks[i].road == tracks[j].road)
        ]
        if len(cand) >= min(cfg.n_links, len(pairs)):
            break
    order = rng.permutation(len(cand))
    links = []
    for o in order[: cfg.n_links]:
        i, j = cand[o]
        links.append((i, j) if rng.random() < 0.5 else (j, i))
    return links


def build_scene(config: SceneConfig) -> Scene:
    """Lay out roads, buildings, trees and vehicle tracks deterministically from ``config.seed``."""
    rng = np.random.default_rng(np.uint64(config.seed & 0xFFFFFFFFFFFFFFFF))
    roads = _roads_for(config.template)
    if config.building_boxes is None:
        static = _place_static(config.template, roads, rng)
    else:
        static = list(config.building_boxes)
    tracks = _place_vehicles(config, roads, rng)
    links = _choose_links(config, tracks, rng)
    return Scene(config, roads, static, tracks, links, (-_EXTENT, _EXTENT, -_EXTENT, _EXTENT))


def step_scene(scene: Scene, index: int, link: int = 0) -> Snapshot:
    cfg = scene.config
    if not 0 <= index < cfg.snapshot_count:
        raise IndexError(f"snapshot index {index} out of range [0, {cfg.snapshot_count})")
    if not 0 <= link < len(scene.links):
        raise IndexError(f"link {link} out of range [0, {len(scene.links)})")
    t = index * cfg.dt
    poses = [(tr.position(t)[0], tr.yaw) for tr in scene.tracks]
    tx_v, rx_v = scene.links[link]
    snap = Snapshot(index, t, poses, None, None, link, tx_v, rx_v, cfg.vehicle_size, cfg.antenna_height)
    snap.tx_pose = snap.mount(tx_v)
    snap.rx_pose = snap.mount(rx_v)
    return snap


def scene_geometry(scene: Scene, snapshot: Snapshot) -> BoxArray:
    """Static boxes followed by the snapshot's vehicle boxes (vehicle v has index n_static + v)."""
    return BoxArray(list(scene.static_boxes) + snapshot.vehicle_boxes())


# --------------------------------------------------------------------------- LiDAR


@dataclass
class LidarConfig:
    channels: int = 16
    vertical_fov: tuple[float, float] = (-15.0, 15.0)
    azimuth_step: float = 0.4
    max_range: float = 120.0
    scan_rate: float = 10.0
    range_noise: float = 0.0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        steps = 360.0 / self.azimuth_step
        if self.azimuth_step <= 0 or abs(steps - round(steps)) > 1e-9:
            raise ValueError("azimuth_step must evenly divide 360")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    def directions(self, yaw: float = 0.0) -> np.ndarray:
        if self.channels == 1:
            elev = np.array([0.5 * (self.vertical_fov[0] + self.vertical_fov[1])])
        else:
            elev = np.linspace(self.vertical_fov[0], self.vertical_fov[1], self.channels)
        n_az = int(round(360.0 / self.azimuth_step))
        az = np.arange(n_az) * self.azimuth_step
        el, az = np.meshgrid(np.radians(elev), np.radians(az) + yaw, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)


def scan(origin, yaw: float, cfg: LidarConfig, boxes: BoxArray, exclude=(), rng=None) -> np.ndarray:
    """One LiDAR revolution from ``origin``; returns the (n, 3) world-frame hit points."""
    dirs = cfg.directions(yaw)
    t, _ = cast_rays(origin, dirs, boxes, cfg.max_range, exclude=exclude)
    hit = np.isfinite(t)
    t = t[hit]
    if cfg.range_noise > 0 and rng is not None:
        t = t + rng.normal(0.0, cfg.range_noise, size=t.shape)
    return np.asarray(origin)[None, :] + t[:, None] * dirs[hit]


def simulate_lidar(scene: Scene, snapshot: Snapshot, vehicle: int, cfg: LidarConfig | None = None,
                   seed: int = 0) -> np.ndarray:
    """Point cloud seen by the sensor mounted on ``vehicle`` (its own body is not hit)."""
    cfg = cfg or LidarConfig()
    boxes = scene_geometry(scene, snapshot)
    host = len(scene.static_boxes) + vehicle
    rng = np.random.default_rng([seed, snapshot.index, vehicle])
    _, yaw = snapshot.vehicle_poses[vehicle]
    return scan(snapshot.mount(vehicle), yaw, cfg, boxes, exclude=(host,), rng=rng)


# --------------------------------------------------------------------------- specular oracle


@dataclass
class ScattererSet:
    points: np.ndarray
    carrier_frequency: float
    path_lengths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    faces: list = field(default_factory=list)  # (box index, face id) per scatterer; -1 = ground

    def __len__(self):
        return self.points.shape[0]


def path_length_factor(f_c: float) -> float:
    """Log-frequency interpolation between the anchors, clamped outside them; strictly decreasing inside."""
    (f0, a0), (f1, a1) = PATH_FACTOR_ANCHORS
    u = (math.log(f_c) - math.log(f0)) / (math.log(f1) - math.log(f0))
    u = min(max(u, 0.0), 1.0)
    return a0 + u * (a1 - a0)


def max_path_length(f_c: float, d_t: float) -> float:
    if f_c <= 0:
        raise ValueError("carrier frequency must be positive")
    return min(path_length_factor(f_c) * d_t, math.sqrt(2.0) * d_t)


def specular_points(tx, rx, boxes: BoxArray, l_max: float, exclude_occluders=(),
                    ground_reflections: bool = False):
    """Single-bounce specular reflection points on box faces (and optionally the ground).

    Returns (points, path_lengths, faces), sorted by path length. A face contributes at most one
    point, found by mirroring tx across the face plane and intersecting the image->rx segment.
    """
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    d_t = float(np.linalg.norm(tx - rx))
    if d_t <= 0:
        raise ValueError("Tx and Rx must not coincide")

    normals, plane_pts, index = (np.zeros((0, 3)), np.zeros((0, 3)), [])
    if len(boxes):
        normals, plane_pts, index = boxes.face_frames()
    if ground_reflections:
        normals = np.vstack([normals, [[0.0, 0.0, 1.0]]])
        plane_pts = np.vstack([plane_pts, [[0.0, 0.0, 0.0]]])
        index = list(index) + [(-1, 2)]
    if normals.shape[0] == 0:
        return np.zeros((0, 3)), np.zeros(0), []

    h_tx = np.einsum("ij,ij->i", tx[None, :] - plane_pts, normals)
    h_rx = np.einsum("ij,ij->i", rx[None, :] - plane_pts, normals)
    front = (h_tx > _EPS) & (h_rx > _EPS)
    frac = np.where(front, h_tx / np.where(front, h_tx + h_rx, 1.0), 0.0)
    image = tx[None, :] - 2.0 * h_tx[:, None] * normals
    s = image + frac[:, None] * (rx[None, :] - image)

    ok = front.copy()
    for f in np.flatnonzero(front):
        k, a = index[f]
        if k < 0:
            continue
        local = boxes.to_local(k, s[f])
        others = [b for b in range(3) if b != a]
        ok[f] = all(abs(local[b]) <= boxes.half[k, b] + _EPS for b in others)
    cand = np.flatnonzero(ok)
    if cand.size == 0:
        return np.zeros((0, 3)), np.zeros(0), []

    s = s[cand]
    lengths = np.linalg.norm(s - tx, axis=1) + np.linalg.norm(s - rx, axis=1)
    keep = vr_mask(s, VRParams.from_transceivers(tx, rx)) & (lengths <= l_max)
    own = np.array([index[f][0] for f in cand])
    occluded = segments_blocked(np.repeat(tx[None, :], len(cand), 0), s, boxes, own, exclude_occluders)
    occluded |= segments_blocked(s, np.repeat(rx[None, :], len(cand), 0), boxes, own, exclude_occluders)
    keep &= ~occluded
    sel = np.flatnonzero(keep)
    order = sel[np.lexsort((sel, lengths[sel]))]
    faces = [(int(index[cand[i]][0]), int(cand[i])) for i in order]
    return s[order], lengths[order], faces


def oracle_scatterers(snapshot: Snapshot, scene: Scene, f_c: float, ground_reflections: bool = False) -> ScattererSet:
    """Ground-truth scatterers for the snapshot's link at carrier ``f_c`` (Hz)."""
    tx, rx = snapshot.tx_pose, snapshot.rx_pose
    d_t = float(np.linalg.norm(tx - rx))
    if d_t <= 0:
        raise ValueError("Tx and Rx must not coincide")
    boxes = scene_geometry(scene, snapshot)
    n_static = len(scene.static_boxes)
    hosts = (n_static + snapshot.tx_vehicle, n_static + snapshot.rx_vehicle)
    pts, lengths, faces = specular_points(tx, rx, boxes, max_path_length(f_c, d_t), hosts, ground_reflections)
    return ScattererSet(pts, f_c, lengths, faces)
