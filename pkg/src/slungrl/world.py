"""Indoor room maps, depth sensing and payload sampling."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage

from .physics import PayloadGeometry, solid_inertia

ROOM_WIDTH = 14.0
ROOM_DEPTH = 8.0
START_REGION = ((1.0, 3.0), (2.0, 6.0))
GOAL_REGION = ((11.0, 13.0), (2.0, 6.0))
CORRIDOR_WIDTH = 1.5

OBSTACLE_COUNTS = {"empty": (0, 0), "easy": (0, 2), "medium": (3, 5), "hard": (6, 9)}

# mass range (kg) and geometry per payload class
PAYLOAD_CLASSES = {
    "Box": ((0.8, 1.6), PayloadGeometry("Box", (0.4, 0.4, 0.4))),
    "Package": ((0.5, 1.2), PayloadGeometry("Box", (0.6, 0.4, 0.3))),
    "Bucket": ((1.0, 2.0), PayloadGeometry("Bucket", (0.15, 0.3))),
}
CLASS_NAMES = tuple(PAYLOAD_CLASSES)


class MapGenerationError(RuntimeError):
    pass


@dataclass
class OccupancyGrid:
    """2-D occupancy extruded floor to ceiling. ``cells[ix, iy]`` is True when occupied."""

    cells: np.ndarray
    resolution: float = 0.1
    width: float = ROOM_WIDTH
    depth: float = ROOM_DEPTH
    ceiling: float = 3.0

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")
        self.cells = np.asarray(self.cells, dtype=bool)
        self.cells[0, :] = self.cells[-1, :] = True
        self.cells[:, 0] = self.cells[:, -1] = True

    @classmethod
    def empty(cls, width=ROOM_WIDTH, depth=ROOM_DEPTH, ceiling=3.0, resolution=0.1):
        nx, ny = int(round(width / resolution)), int(round(depth / resolution))
        return cls(np.zeros((nx, ny), dtype=bool), resolution, width, depth, ceiling)

    @property
    def shape(self):
        return self.cells.shape

    def add_box(self, x0, x1, y0, y1):
        r = self.resolution
        i0, i1 = max(int(math.floor(x0 / r)), 0), min(int(math.ceil(x1 / r)), self.shape[0])
        j0, j1 = max(int(math.floor(y0 / r)), 0), min(int(math.ceil(y1 / r)), self.shape[1])
        self.cells[i0:i1, j0:j1] = True

    def cell_center(self, ix, iy):
        return ((ix + 0.5) * self.resolution, (iy + 0.5) * self.resolution)

    def to_text(self) -> str:
        """Header ``width depth ceiling resolution``, then one row per cell row, highest y first."""
        lines = [f"{self.width:g} {self.depth:g} {self.ceiling:g} {self.resolution:g}"]
        for iy in range(self.shape[1] - 1, -1, -1):
            lines.append("".join("#" if c else "." for c in self.cells[:, iy]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OccupancyGrid":
        rows = [ln for ln in text.splitlines() if ln.strip()]
        width, depth, ceiling, res = (float(v) for v in rows[0].split())
        body = rows[1:]
        nx, ny = int(round(width / res)), int(round(depth / res))
        if len(body) != ny or any(len(r) != nx for r in body):
            raise ValueError(f"map body must be {ny} rows of {nx} cells")
        cells = np.zeros((nx, ny), dtype=bool)
        for k, row in enumerate(body):
            if set(row) - {".", "#"}:
                raise ValueError(f"bad map character in row {k + 2}")
            cells[:, ny - 1 - k] = [c == "#" for c in row]
        return cls(cells, res, width, depth, ceiling)


@njit(cache=True)
def _occupied(cells, res, width, depth, ceiling, x, y, z):
    if z <= 0.0 or z >= ceiling or x < 0.0 or y < 0.0 or x >= width or y >= depth:
        return True
    ix = int(x / res)
    iy = int(y / res)
    if ix >= cells.shape[0]:
        ix = cells.shape[0] - 1
    if iy >= cells.shape[1]:
        iy = cells.shape[1] - 1
    return cells[ix, iy]


@njit(cache=True)
def _cast(cells, res, width, depth, ceiling, ox, oy, oz, dx, dy, dz, max_range):
    step = 0.5 * res
    k = 0
    while True:
        t = k * step
        if t >= max_range:
            return max_range
        if _occupied(cells, res, width, depth, ceiling, ox + t * dx, oy + t * dy, oz + t * dz):
            return t
        k += 1


@njit(cache=True)
def _cast_many(cells, res, width, depth, ceiling, origins, dirs, max_range, out):
    for i in range(dirs.shape[0]):
        out[i] = _cast(cells, res, width, depth, ceiling, origins[i, 0], origins[i, 1], origins[i, 2],
                       dirs[i, 0], dirs[i, 1], dirs[i, 2], max_range)


@njit(cache=True)
def _scan(cells, res, width, depth, ceiling, positions, yaws, az, el, max_range, out):
    for i in range(positions.shape[0]):
        for k in range(az.shape[0]):
            h = yaws[i] + az[k]
            ce = math.cos(el[k])
            out[i, k] = _cast(cells, res, width, depth, ceiling, positions[i, 0], positions[i, 1],
                              positions[i, 2], ce * math.cos(h), ce * math.sin(h), math.sin(el[k]),
                              max_range) / max_range


def is_occupied(grid: OccupancyGrid, point) -> bool:
    x, y, z = (float(c) for c in point)
    return bool(_occupied(grid.cells, grid.resolution, grid.width, grid.depth, grid.ceiling, x, y, z))


def raycast(grid: OccupancyGrid, origin, direction, max_range: float) -> float:
    d = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be a unit vector")
    o = np.asarray(origin, dtype=float)
    return float(_cast(grid.cells, grid.resolution, grid.width, grid.depth, grid.ceiling,
                       o[0], o[1], o[2], d[0], d[1], d[2], float(max_range)))


@dataclass(frozen=True)
class SensorSpec:
    h_fov: float = math.radians(50.0)
    v_fov: float = math.radians(50.0)
    max_range: float = 3.0
    n_rays_h: int = 9
    n_rays_v: int = 5

    def __post_init__(self):
        if not (0 < self.h_fov < math.pi and 0 < self.v_fov < math.pi):
            raise ValueError("fields of view must lie in (0, 180) degrees")
        if self.max_range <= 0:
            raise ValueError("max_range must be > 0")

    @property
    def n_rays(self) -> int:
        return self.n_rays_h * self.n_rays_v

    def ray_angles(self):
        """(azimuth, elevation) per ray, elevation-major."""
        return _ray_angles(self.h_fov, self.v_fov, self.n_rays_h, self.n_rays_v)


@functools.lru_cache(maxsize=8)
def _ray_angles(h_fov, v_fov, n_h, n_v):
    az = np.linspace(-h_fov / 2, h_fov / 2, n_h)
    el = np.linspace(-v_fov / 2, v_fov / 2, n_v)
    ee, aa = np.meshgrid(el, az, indexing="ij")
    return aa.ravel(), ee.ravel()


@dataclass
class SensorReading:
    depth: np.ndarray  # normalized by max_range, in [0, 1]
    goal_bearing: tuple | None  # (azimuth rad, elevation rad, range / max_range)


def goal_bearing(position, yaw: float, goal, spec: SensorSpec):
    rel = np.asarray(goal, dtype=float) - np.asarray(position, dtype=float)
    rng = float(np.linalg.norm(rel))
    if rng > spec.max_range:
        return None
    planar = math.hypot(rel[0], rel[1])
    az = math.atan2(rel[1], rel[0]) - yaw if planar > 0 else 0.0
    az = (az + math.pi) % (2 * math.pi) - math.pi
    el = math.atan2(rel[2], planar)
    if abs(az) > spec.h_fov / 2 or abs(el) > spec.v_fov / 2:
        return None
    return (az, el, rng / spec.max_range)


def depth_scan(grid: OccupancyGrid, positions, yaws, spec: SensorSpec) -> np.ndarray:
    """Normalized depth images for one or more sensors; shape (n_sensors, n_rays)."""
    pos = np.ascontiguousarray(np.asarray(positions, dtype=float).reshape(-1, 3))
    yaw = np.ascontiguousarray(np.asarray(yaws, dtype=float).reshape(-1))
    az, el = spec.ray_angles()
    out = np.empty((len(pos), len(az)))
    _scan(grid.cells, grid.resolution, grid.width, grid.depth, grid.ceiling, pos, yaw, az, el,
          float(spec.max_range), out)
    return out


def sense(state, uav_index: int, grid: OccupancyGrid, spec: SensorSpec, goal) -> SensorReading:
    if not 0 <= uav_index < state.n:
        raise IndexError(f"uav_index {uav_index} out of range for {state.n} UAVs")
    uav = state.uavs[uav_index]
    yaw = float(uav.attitude[2])
    return SensorReading(depth_scan(grid, uav.position, yaw, spec)[0], goal_bearing(uav.position, yaw, goal, spec))


# ---------------------------------------------------------------------------
# procedural rooms


def _region_cells(grid: OccupancyGrid, region):
    (x0, x1), (y0, y1) = region
    r = grid.resolution
    return slice(int(x0 / r), int(math.ceil(x1 / r))), slice(int(y0 / r), int(math.ceil(y1 / r)))


def clearance_mask(grid: OccupancyGrid, width: float = CORRIDOR_WIDTH) -> np.ndarray:
    """Cells whose center is farther than width/2 from every occupied cell."""
    dist = ndimage.distance_transform_edt(~grid.cells) * grid.resolution
    return dist > width / 2


def corridor_exists(grid: OccupancyGrid, start=START_REGION, goal=GOAL_REGION, width=CORRIDOR_WIDTH) -> bool:
    """Whether a disk of diameter ``width`` can travel from the start region to the goal region."""
    free = clearance_mask(grid, width)
    labels, _ = ndimage.label(free)
    sx, sy = _region_cells(grid, start)
    gx, gy = _region_cells(grid, goal)
    a = set(np.unique(labels[sx, sy])) - {0}
    b = set(np.unique(labels[gx, gy])) - {0}
    return bool(a & b)


def sample_map(seed: int, difficulty: str = "easy", ceiling: float = 3.0, resolution: float = 0.1,
               start=START_REGION, goal=GOAL_REGION) -> OccupancyGrid:
    if difficulty not in OBSTACLE_COUNTS:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    lo, hi = OBSTACLE_COUNTS[difficulty]
    rng = np.random.default_rng([int(seed), 0x6D6170])
    for _ in range(100):
        grid = OccupancyGrid.empty(ceiling=ceiling, resolution=resolution)
        for _ in range(int(rng.integers(lo, hi + 1))):
            w, d = rng.uniform(0.4, 1.6), rng.uniform(0.4, 2.5)
            cx, cy = rng.uniform(4.0, 10.0), rng.uniform(0.0, ROOM_DEPTH)
            grid.add_box(cx - w / 2, cx + w / 2, cy - d / 2, cy + d / 2)
        if corridor_exists(grid, start, goal):
            return grid
    raise MapGenerationError(f"no {CORRIDOR_WIDTH} m corridor after 100 draws (seed={seed}, {difficulty})")


def free_point(grid: OccupancyGrid, region, z: float, rng, clearance: float = CORRIDOR_WIDTH / 2):
    """Uniform point in ``region`` whose cell keeps ``clearance`` from obstacles."""
    free = ndimage.distance_transform_edt(~grid.cells) * grid.resolution > clearance
    (x0, x1), (y0, y1) = region
    for _ in range(1000):
        x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
        if free[int(x / grid.resolution), int(y / grid.resolution)]:
            return np.array([x, y, z])
    raise MapGenerationError("no free point in region")


# ---------------------------------------------------------------------------
# payloads


@dataclass
class PayloadSample:
    payload_class: str
    geometry: PayloadGeometry
    mass: float
    inertia_diag: np.ndarray
    attach_points: np.ndarray = field(repr=False)


def attach_pattern(geometry: PayloadGeometry, n_uavs: int) -> np.ndarray:
    """Symmetric attach points on the top face (box), rim (bucket) or top line (cylinder)."""
    top = geometry.half_height
    if n_uavs == 1:
        return np.array([[0.0, 0.0, top]])
    if geometry.shape == "Cylinder":
        xs = np.linspace(-0.4, 0.4, n_uavs) * geometry.dims[0]
        return np.stack([xs, np.zeros(n_uavs), np.full(n_uavs, top)], axis=1)
    radius = geometry.dims[0] if geometry.shape == "Bucket" else 0.35 * min(geometry.dims[:2])
    ang = math.pi / 2 + 2 * math.pi * np.arange(n_uavs) / n_uavs
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(n_uavs, top)], axis=1)


def sample_payload(payload_class: str, seed, n_uavs: int) -> PayloadSample:
    if n_uavs < 1:
        raise ValueError("n_uavs must be >= 1")
    if payload_class not in PAYLOAD_CLASSES:
        raise ValueError(f"unknown payload class {payload_class!r}")
    (lo, hi), geometry = PAYLOAD_CLASSES[payload_class]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng([int(seed), 0x706179])
    mass = float(rng.uniform(lo, hi))
    return PayloadSample(payload_class, geometry, mass, solid_inertia(geometry, mass),
                         attach_pattern(geometry, n_uavs))
