"""Scene -> (feature grid, scatterer grid) sample generation and condition keys."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import preprocess as pp
from .scene import LidarConfig, SceneConfig, build_scene, oracle_scatterers, simulate_lidar, step_scene
from .training import ArrayData

SCENARIO_NAMES = {"crossroad": "Crossroad", "forking_road": "ForkingRoad", "wide_lane": "WideLane"}
BANDS = {"28GHz": 28e9, "sub6GHz": 5.9e9}
BAND_RANGES = {"28GHz": (24e9, 40e9), "sub6GHz": (0.4e9, 7.125e9)}
VTD_NAMES = {"high": "HighVTD", "low": "LowVTD"}


def band_name(f_c: float) -> str:
    for name, (lo, hi) in BAND_RANGES.items():
        if lo <= f_c <= hi:
            return name
    raise ValueError(f"carrier {f_c:g} Hz is outside the supported bands")


def condition_key(template: str, f_c: float, vtd: str) -> str:
    return f"{SCENARIO_NAMES[template]}_{band_name(f_c)}_{VTD_NAMES[vtd]}"


def parse_condition(key: str) -> tuple[str, float, str]:
    """'Crossroad_28GHz_HighVTD' -> ('crossroad', 28e9, 'high')."""
    parts = key.split("_")
    if len(parts) != 3:
        raise ValueError(f"condition key {key!r} is not Scenario_FrequencyBand_VTD")
    scen, band, vtd = parts
    inv_s = {v: k for k, v in SCENARIO_NAMES.items()}
    inv_v = {v: k for k, v in VTD_NAMES.items()}
    if scen not in inv_s or band not in BANDS or vtd not in inv_v:
        raise ValueError(f"unknown scenario, band or VTD in condition key {key!r}")
    return inv_s[scen], BANDS[band], inv_v[vtd]


@dataclass
class GenerationConfig:
    condition: str = "Crossroad_28GHz_HighVTD"
    sample_count: int = 600
    m_x: int = 80
    m_y: int = 80
    n_x: int = 10
    n_y: int = 10
    scene_seed: int = 0
    snapshot_count: int = 100
    n_links: int = 6
    lidar_seed: int = 0
    ground_threshold: float = pp.DEFAULT_GROUND_THRESHOLD
    distance_mode: str = "3d"
    vehicle_count: int | None = None
    carrier: float | None = None  # defaults to the band's nominal carrier
    lidar: dict = field(default_factory=dict)

    def __post_init__(self):
        template, f_nominal, vtd = parse_condition(self.condition)
        if self.carrier is None:
            self.carrier = f_nominal
        if band_name(self.carrier) != self.condition.split("_")[1]:
            raise ValueError(f"carrier {self.carrier:g} Hz is not in the band of {self.condition}")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")

    @property
    def template(self) -> str:
        return parse_condition(self.condition)[0]

    @property
    def vtd(self) -> str:
        return parse_condition(self.condition)[2]

    def scene_config(self) -> SceneConfig:
        return SceneConfig(template=self.template, vtd=self.vtd, vehicle_count=self.vehicle_count,
                           snapshot_count=self.snapshot_count, seed=self.scene_seed, n_links=self.n_links,
                           allow_count_override=self.vehicle_count is not None)

    def lidar_config(self) -> LidarConfig:
        return LidarConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.lidar.items()})

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generation config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class SampleRecord:
    snapshot: int
    link: int
    features: np.ndarray  # (3, m_x, m_y) float32
    target_raw: np.ndarray  # (n_x, n_y) float32, scatterers per m^2
    target_norm: np.ndarray  # (n_x, n_y) float32
    tx: tuple[float, float, float]
    rx: tuple[float, float, float]
    f_c: float
    bounds: tuple[float, float, float, float]
    n_scatterers: int = 0
    dropped: int = 0

    def meta(self) -> dict:
        return {"snapshot": self.snapshot, "link": self.link, "tx": list(self.tx), "rx": list(self.rx),
                "f_c": self.f_c, "bounds": list(self.bounds), "n_scatterers": self.n_scatterers,
                "dropped": self.dropped}


def make_sample(scene, snapshot, cfg: GenerationConfig, lidar: LidarConfig, cache: dict | None = None):
    """One (features, raw target) pair for a snapshot/link; None when the cloud cannot span a grid."""
    clouds = []
    for v in (snapshot.tx_vehicle, snapshot.rx_vehicle):
        key = (snapshot.index, v)
        if cache is not None and key in cache:
            pc = cache[key]
        else:
            pc = simulate_lidar(scene, snapshot, v, lidar, seed=cfg.lidar_seed)
            if cache is not None:
                cache[key] = pc
        clouds.append(pc)
    tx, rx = snapshot.tx_pose, snapshot.rx_pose
    pc = pp.concat_clouds(*clouds)
    pc = pp.remove_ground(pc, cfg.ground_threshold)
    pc = pp.vr_filter(pc, pp.VRParams.from_transceivers(tx, rx))
    try:
        feats = pp.extract_features(pc, tx, rx, cfg.m_x, cfg.m_y, cfg.distance_mode)
    except pp.DegenerateBoundsError:
        return None
    sc = oracle_scatterers(snapshot, scene, cfg.carrier)
    grid = pp.scatterer_grid(sc, feats.bounds, cfg.n_x, cfg.n_y)
    return SampleRecord(
        snapshot=snapshot.index, link=snapshot.link, features=feats.data.astype(np.float32),
        target_raw=grid.density.astype(np.float32), target_norm=np.zeros((cfg.n_x, cfg.n_y), np.float32),
        tx=tuple(float(v) for v in tx), rx=tuple(float(v) for v in rx), f_c=float(cfg.carrier),
        bounds=feats.bounds, n_scatterers=len(sc), dropped=grid.dropped,
    )


def generate(cfg: GenerationConfig, progress=None) -> tuple[list[SampleRecord], dict]:
    """Walk (snapshot, link) pairs until ``sample_count`` samples exist; targets are max-normalized."""
    scene = build_scene(cfg.scene_config())
    lidar = cfg.lidar_config()
    records: list[SampleRecord] = []
    skipped = 0
    for idx in range(cfg.snapshot_count):
        cache: dict = {}
        for link in range(len(scene.links)):
            if len(records) == cfg.sample_count:
                break
            rec = make_sample(scene, step_scene(scene, idx, link), cfg, lidar, cache)
            if rec is None:
                skipped += 1
                continue
            records.append(rec)
            if progress:
                progress(len(records), cfg.sample_count)
        if len(records) == cfg.sample_count:
            break
    if len(records) < cfg.sample_count:
        raise RuntimeError(f"scene yields only {len(records)} samples; raise snapshot_count or n_links")
    norm = max(float(np.max(r.target_raw)) for r in records)
    norm = norm if norm > 0 else 1.0
    for r in records:
        r.target_norm = (r.target_raw / np.float32(norm)).astype(np.float32)
    manifest = {
        "format_version": 1,
        "condition_key": cfg.condition,
        "sample_count": len(records),
        "m_x": cfg.m_x, "m_y": cfg.m_y, "n_x": cfg.n_x, "n_y": cfg.n_y,
        "normalization": norm,
        "scene_seed": cfg.scene_seed,
        "params_digest": cfg.digest(),
        "generation": cfg.to_dict(),
        "skipped": skipped,
        "occupied_cell_fraction": float(np.mean([np.mean(r.target_raw > 0) for r in records])),
    }
    return records, manifest


def to_arrays(records: list[SampleRecord]):
    return ArrayData(np.stack([r.features for r in records]), np.stack([r.target_norm for r in records]),
                     np.array([r.f_c for r in records]))
