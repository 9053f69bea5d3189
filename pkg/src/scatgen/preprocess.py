"""Point-cloud preprocessing: concatenation, ground removal, visibility-region filtering,
grid features and scatterer-density targets.

Point clouds are plain ``(n, 3)`` float arrays in the world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_GROUND_THRESHOLD = 0.3


class DegenerateBoundsError(ValueError):
    """Raised when a point cloud cannot span a grid (empty, or zero extent on an axis)."""


def _as_cloud(pc) -> np.ndarray:
    pc = np.asarray(pc, dtype=np.float64)
    if pc.size == 0:
        return np.zeros((0, 3))
    if pc.ndim != 2 or pc.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (n, 3), got {pc.shape}")
    return pc


@dataclass(frozen=True)
class VRParams:
    """Visibility-region ellipsoid with the transceivers as foci.

    The minor axis and the focal length both equal the Tx-Rx distance, which fixes the
    major axis at sqrt(2) times that distance.
    """

    tx: tuple[float, float, float]
    rx: tuple[float, float, float]
    major_axis_2a: float
    minor_axis_2b: float
    focal_2c: float

    @classmethod
    def from_transceivers(cls, tx, rx) -> "VRParams":
        tx = np.asarray(tx, dtype=np.float64)
        rx = np.asarray(rx, dtype=np.float64)
        d_t = float(np.linalg.norm(tx - rx))
        if d_t <= 0:
            raise ValueError("transceivers are co-located (D_T = 0); the visibility region is undefined")
        return cls(tuple(tx), tuple(rx), math.sqrt(d_t**2 + d_t**2), d_t, d_t)

    @property
    def d_t(self) -> float:
        return self.focal_2c


def concat_clouds(pc_tx, pc_rx) -> np.ndarray:
    """Multiset union, Tx points first; duplicates are kept."""
    return np.concatenate([_as_cloud(pc_tx), _as_cloud(pc_rx)], axis=0)


def remove_ground(pc, h_g: float = DEFAULT_GROUND_THRESHOLD) -> np.ndarray:
    if h_g < 0:
        raise ValueError("ground threshold must be non-negative")
    pc = _as_cloud(pc)
    return pc[pc[:, 2] >= h_g]


def vr_mask(points, vr: VRParams) -> np.ndarray:
    pts = _as_cloud(points)
    if vr.focal_2c <= 0:
        raise ValueError("transceivers are co-located (D_T = 0); the visibility region is undefined")
    focal_sum = np.linalg.norm(pts - np.asarray(vr.tx), axis=1) + np.linalg.norm(pts - np.asarray(vr.rx), axis=1)
    return focal_sum <= vr.major_axis_2a


def vr_filter(pc, vr: VRParams) -> np.ndarray:
    """Keep points whose focal-distance sum does not exceed the major axis."""
    pc = _as_cloud(pc)
    return pc[vr_mask(pc, vr)]


def cell_indices(x: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
    """Half-open cell intervals [lo + i*w, lo + (i+1)*w); the global max edge belongs to the last cell.

    Values outside [lo, hi] map to -1.
    """
    x = np.asarray(x, dtype=np.float64)
    w = (hi - lo) / n
    idx = np.floor((x - lo) / w).astype(np.int64)
    idx = np.where(x == hi, n - 1, idx)
    # guard against rounding pushing interior values across an edge
    idx = np.clip(idx, 0, n - 1)
    left = lo + idx * w
    idx = np.where((x < left) & (idx > 0), idx - 1, idx)
    right = lo + (idx + 1) * w
    idx = np.where((x >= right) & (idx < n - 1), idx + 1, idx)
    return np.where((x < lo) | (x > hi), -1, idx)


@dataclass
class FeatureGrid:
    """Three planes over an m_x x m_y grid: point density, max height, mean transceiver distance."""

    data: np.ndarray  # (3, m_x, m_y)
    bounds: tuple[float, float, float, float]  # x_min, x_max, y_min, y_max

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def cell_size(self) -> tuple[float, float]:
        x_min, x_max, y_min, y_max = self.bounds
        m_x, m_y = self.shape
        return (x_max - x_min) / m_x, (y_max - y_min) / m_y

    @property
    def density(self) -> np.ndarray:
        return self.data[0]

    @property
    def max_height(self) -> np.ndarray:
        return self.data[1]

    @property
    def mean_distance(self) -> np.ndarray:
        return self.data[2]


def cloud_bounds(pc) -> tuple[float, float, float, float]:
    pc = _as_cloud(pc)
    if pc.shape[0] == 0:
        raise DegenerateBoundsError("degenerate bounds: empty point cloud")
    x_min, y_min = pc[:, 0].min(), pc[:, 1].min()
    x_max, y_max = pc[:, 0].max(), pc[:, 1].max()
    if not (x_max > x_min and y_max > y_min):
        raise DegenerateBoundsError("degenerate bounds: point cloud has zero extent along x or y")
    return float(x_min), float(x_max), float(y_min), float(y_max)


def cell_centers(bounds, m_x: int, m_y: int):
    x_min, x_max, y_min, y_max = bounds
    xg, yg = (x_max - x_min) / m_x, (y_max - y_min) / m_y
    cx = x_min + (np.arange(m_x) + 0.5) * xg
    cy = y_min + (np.arange(m_y) + 0.5) * yg
    return np.meshgrid(cx, cy, indexing="ij")


def extract_features(pc, tx, rx, m_x: int, m_y: int, distance_mode: str = "3d") -> FeatureGrid:
    """Grid the cloud over its own x/y extremes and compute the three feature planes.

    ``distance_mode`` selects whether cell-centre distances to the transceivers include the
    antenna height ("3d", cell centres on the ground plane) or are planar ("2d").
    """
    if m_x < 1 or m_y < 1:
        raise ValueError("grid dimensions must be >= 1")
    if distance_mode not in ("2d", "3d"):
        raise ValueError("distance_mode must be '2d' or '3d'")
    pc = _as_cloud(pc)
    bounds = cloud_bounds(pc)
    x_min, x_max, y_min, y_max = bounds
    xg, yg = (x_max - x_min) / m_x, (y_max - y_min) / m_y

    ix = cell_indices(pc[:, 0], x_min, x_max, m_x)
    iy = cell_indices(pc[:, 1], y_min, y_max, m_y)
    flat = ix * m_y + iy

    counts = np.bincount(flat, minlength=m_x * m_y).reshape(m_x, m_y)
    with np.errstate(over="ignore"):
        density = counts / (xg * yg)
    if not np.isfinite(density).all():
        # extent so small that the cell area underflows
        raise DegenerateBoundsError("degenerate bounds: cell area too small for a finite density")
    height = np.full(m_x * m_y, -np.inf)
    np.maximum.at(height, flat, pc[:, 2])
    height = np.where(np.isfinite(height), height, 0.0).reshape(m_x, m_y)
    height = np.maximum(height, 0.0)

    gx, gy = cell_centers(bounds, m_x, m_y)
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    if distance_mode == "3d":
        d_tx = np.sqrt((gx - tx[0]) ** 2 + (gy - tx[1]) ** 2 + tx[2] ** 2)
        d_rx = np.sqrt((gx - rx[0]) ** 2 + (gy - rx[1]) ** 2 + rx[2] ** 2)
    else:
        d_tx = np.hypot(gx - tx[0], gy - tx[1])
        d_rx = np.hypot(gx - rx[0], gy - rx[1])
    distance = 0.5 * (d_tx + d_rx)
    return FeatureGrid(np.stack([density, height, distance]), bounds)


@dataclass
class ScattererGrid:
    density: np.ndarray  # (n_x, n_y), scatterers per square metre
    bounds: tuple[float, float, float, float]
    dropped: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.density.shape

    @property
    def cell_size(self) -> tuple[float, float]:
        x_min, x_max, y_min, y_max = self.bounds
        n_x, n_y = self.shape
        return (x_max - x_min) / n_x, (y_max - y_min) / n_y

    @property
    def cell_area(self) -> float:
        xg, yg = self.cell_size
        return xg * yg

    def counts(self) -> np.ndarray:
        return self.density * self.cell_area


def scatterer_grid(scatterers, bounds, n_x: int, n_y: int) -> ScattererGrid:
    """Drop scatterer positions (n, 3) or (n, 2) onto the grid; points outside bounds are counted in ``dropped``."""
    pts = np.asarray(getattr(scatterers, "points", scatterers), dtype=np.float64)
    if pts.size == 0:
        pts = np.zeros((0, 2))
    if pts.ndim != 2 or pts.shape[1] not in (2, 3):
        raise ValueError(f"scatterer positions must have shape (n, 2) or (n, 3), got {pts.shape}")
    x_min, x_max, y_min, y_max = bounds
    xg, yg = (x_max - x_min) / n_x, (y_max - y_min) / n_y
    if not (xg > 0 and yg > 0 and xg * yg >= np.finfo(np.float64).tiny):
        raise DegenerateBoundsError("degenerate bounds for scatterer grid")
    ix = cell_indices(pts[:, 0], x_min, x_max, n_x)
    iy = cell_indices(pts[:, 1], y_min, y_max, n_y)
    inside = (ix >= 0) & (iy >= 0)
    counts = np.bincount(ix[inside] * n_y + iy[inside], minlength=n_x * n_y).reshape(n_x, n_y)
    return ScattererGrid(counts / (xg * yg), tuple(float(b) for b in bounds), int((~inside).sum()))
