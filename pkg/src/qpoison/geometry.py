"""Rectangular chip geometry with classified surface regions.

Chip frame: x, y in [-extent/2, extent/2] um, z in [0, thickness] um with
the device layer (ground plane and junction electrodes) on the top face
z = thickness and the optional island lattice on the bottom face z = 0.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

FACE_BOTTOM, FACE_TOP, FACE_XLO, FACE_XHI, FACE_YLO, FACE_YHI = range(6)
FACE_NAMES = ("bottom", "top", "x-", "x+", "y-", "y+")

REGION_GROUNDPLANE = 0
REGION_ELECTRODE = 1
REGION_BARE = 2
REGION_ISLAND = 3
REGION_WALL = 4
REGION_NAMES = ("GroundPlane", "ElectrodePatch", "BareSi", "Island", "Wall")

BOUNDARY_TOL = 1e-6
LOOKUP_CELL = 50.0


class GeometryError(ValueError):
    pass


# Six-qubit layout: approximate positions (um, chip frame) of a published device;
# Q6 is nearest the injector, Q1 farthest.
SIX_QUBIT_CENTERS = {
    "Q1": (-2500.0, 1250.0),
    "Q2": (0.0, 1250.0),
    "Q3": (2500.0, 1250.0),
    "Q4": (-2500.0, -1250.0),
    "Q5": (0.0, -1250.0),
    "Q6": (2500.0, -1250.0),
}
SIX_QUBIT_INJECTOR = (3200.0, -2200.0)


@dataclass(frozen=True)
class ChipGeometry:
    extent_x: float = 8000.0
    extent_y: float = 8000.0
    thickness: float = 525.0
    electrode_patch_size: float = 10.0
    electrode_pitch: float = 200.0
    electrode_centers: tuple = ()
    electrode_labels: tuple = ()
    island_material: str | None = None
    island_thickness: float = 0.0      # um
    island_size: float = 200.0
    island_gap: float = 50.0
    groundplane_material: str | None = "Nb"
    groundplane_thickness: float = 150.0  # nm
    electrode_thickness: float = 120.0    # nm, bilayer total
    wall_escape_probability: float = 0.025
    injector_position: tuple = SIX_QUBIT_INJECTOR
    layout: str = "six-qubit"

    def __post_init__(self):
        object.__setattr__(self, "electrode_centers",
                           tuple(tuple(float(v) for v in c) for c in self.electrode_centers))
        if not self.electrode_labels:
            object.__setattr__(self, "electrode_labels",
                               tuple(f"E{i}" for i in range(len(self.electrode_centers))))
        self.validate()

    @property
    def half_x(self):
        return 0.5 * self.extent_x

    @property
    def half_y(self):
        return 0.5 * self.extent_y

    @property
    def island_pitch(self):
        return self.island_size + self.island_gap

    @property
    def islands_enabled(self):
        return self.island_material is not None and self.island_thickness > 0

    @property
    def centers(self):
        return np.array(self.electrode_centers, dtype=float).reshape(-1, 2)

    def validate(self):
        for key in ("extent_x", "extent_y", "thickness", "electrode_patch_size"):
            if not getattr(self, key) > 0:
                raise GeometryError(f"{key} must be positive")
        if not 0.0 <= self.wall_escape_probability <= 1.0:
            raise GeometryError("wall_escape_probability must lie in [0, 1]")
        if len(self.electrode_labels) != len(self.electrode_centers):
            raise GeometryError("one label per electrode required")
        c = self.centers
        h = 0.5 * self.electrode_patch_size
        if len(c):
            if np.any(np.abs(c[:, 0]) + h > self.half_x) or np.any(np.abs(c[:, 1]) + h > self.half_y):
                raise GeometryError("electrode patch extends beyond the top face")
            if len(c) > 1:
                d = np.abs(c[:, None, :] - c[None, :, :]).max(axis=-1)
                np.fill_diagonal(d, np.inf)
                if d.min() < self.electrode_patch_size:
                    raise GeometryError("electrode patches overlap")
        ix, iy = self.injector_position
        if abs(ix) >= self.half_x or abs(iy) >= self.half_y:
            raise GeometryError("injector lies outside the top face")
        if self.island_gap < 0 or self.island_size <= 0:
            raise GeometryError("island size must be positive and gap non-negative")

    def to_dict(self):
        d = asdict(self)
        d["electrode_centers"] = [list(c) for c in self.electrode_centers]
        d["electrode_labels"] = list(self.electrode_labels)
        d["injector_position"] = list(self.injector_position)
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def electrode_index(self, label):
        return self.electrode_labels.index(label)

    # ---- classification (pure python mirrors of the kernels) ----

    def classify_backside(self, x, y):
        if not self.islands_enabled:
            return REGION_BARE
        return REGION_ISLAND if _island_at(x, y, -self.half_x, -self.half_y, self.island_pitch,
                                           self.island_gap) else REGION_BARE

    def electrode_at(self, x, y):
        t = self.tables()
        return int(_electrode_at(x, y, t.cell0, t.cell_n, t.cell_start, t.cell_items, t.centers,
                                 t.half_patch))

    def classify_point(self, face, point):
        x, y = point[0], point[1]
        if face == FACE_TOP:
            e = self.electrode_at(x, y)
            if e >= 0:
                return REGION_ELECTRODE, e
            return (REGION_GROUNDPLANE if self.groundplane_material else REGION_BARE), -1
        if face == FACE_BOTTOM:
            return self.classify_backside(x, y), -1
        return REGION_WALL, -1

    def ray_to_boundary(self, position, velocity):
        p = np.asarray(position, dtype=float)
        v = np.asarray(velocity, dtype=float)
        if not (abs(p[0]) < self.half_x and abs(p[1]) < self.half_y and 0 < p[2] < self.thickness):
            raise GeometryError("position must lie strictly inside the chip")
        if not np.linalg.norm(v) > 0:
            raise GeometryError("velocity must be non-zero")
        out = np.empty(3)
        t, face = _ray_box(p, v, self.half_x, self.half_y, self.thickness, out)
        region, idx = self.classify_point(face, out)
        return SurfaceHit(face, out, region, idx, t)

    # ---- coverage audit ----

    def electrode_coverage(self):
        return len(self.electrode_centers) * self.electrode_patch_size ** 2 / (self.extent_x * self.extent_y)

    def island_coverage(self):
        if not self.islands_enabled:
            return 0.0
        return island_coverage_fraction(self.extent_x, self.extent_y, self.island_pitch, self.island_gap)

    def tables(self):
        cached = getattr(self, "_tables", None)
        if cached is None:
            cached = GeometryTables.build(self)
            object.__setattr__(self, "_tables", cached)
        return cached


@dataclass(frozen=True)
class SurfaceHit:
    face: int
    point: np.ndarray
    region: int
    electrode: int
    flight_time: float

    @property
    def region_name(self):
        return REGION_NAMES[self.region]


@dataclass(frozen=True)
class GeometryTables:
    """Flat arrays handed to the transport kernel."""
    box: np.ndarray            # half_x, half_y, thickness
    centers: np.ndarray        # (n, 2)
    half_patch: float
    cell0: np.ndarray          # lookup grid origin (x, y) and cell size
    cell_n: np.ndarray         # nx, ny
    cell_start: np.ndarray
    cell_items: np.ndarray
    island: np.ndarray         # enabled, x0, y0, pitch, gap

    @classmethod
    def build(cls, g):
        centers = g.centers
        h = 0.5 * g.electrode_patch_size
        nx = int(math.ceil(g.extent_x / LOOKUP_CELL))
        ny = int(math.ceil(g.extent_y / LOOKUP_CELL))
        buckets = [[] for _ in range(nx * ny)]
        for i, (cx, cy) in enumerate(centers):
            ix0 = max(0, int((cx - h + g.half_x) // LOOKUP_CELL))
            ix1 = min(nx - 1, int((cx + h + g.half_x) // LOOKUP_CELL))
            iy0 = max(0, int((cy - h + g.half_y) // LOOKUP_CELL))
            iy1 = min(ny - 1, int((cy + h + g.half_y) // LOOKUP_CELL))
            for ix in range(ix0, ix1 + 1):
                for iy in range(iy0, iy1 + 1):
                    buckets[ix * ny + iy].append(i)
        start = np.zeros(nx * ny + 1, dtype=np.int64)
        start[1:] = np.cumsum([len(b) for b in buckets])
        items = np.array([i for b in buckets for i in b], dtype=np.int64)
        island = np.array([1.0 if g.islands_enabled else 0.0, -g.half_x, -g.half_y,
                           g.island_pitch, g.island_gap])
        return cls(np.array([g.half_x, g.half_y, g.thickness]),
                   np.ascontiguousarray(centers, dtype=float).reshape(-1, 2), h,
                   np.array([-g.half_x, -g.half_y, LOOKUP_CELL]), np.array([nx, ny], dtype=np.int64),
                   start, items, island)


def island_coverage_fraction(extent_x, extent_y, pitch, gap):
    """Exact island area fraction for the corner-anchored lattice."""
    def covered_1d(length):
        n = int(length // pitch)
        rem = length - n * pitch
        return n * (pitch - gap) + min(max(rem - 0.5 * gap, 0.0), pitch - gap)
    return covered_1d(extent_x) * covered_1d(extent_y) / (extent_x * extent_y)


def dense_grid_centers(n=39, pitch=200.0):
    offs = (np.arange(n) - 0.5 * (n - 1)) * pitch
    xx, yy = np.meshgrid(offs, offs, indexing="ij")
    centers = np.stack([xx.ravel(), yy.ravel()], axis=1)
    labels = [f"g{i}_{j}" for i in range(n) for j in range(n)]
    return centers, labels


def make_geometry(layout="six-qubit", grid_n=39, electrode_pitch=200.0, injector_position=None,
                  **kwargs):
    """Build a chip from a layout name and keyword overrides."""
    if layout == "dense-grid":
        centers, labels = dense_grid_centers(grid_n, electrode_pitch)
        inj = injector_position if injector_position is not None else (0.0, 0.0)
    elif layout == "six-qubit":
        labels = list(SIX_QUBIT_CENTERS)
        centers = np.array([SIX_QUBIT_CENTERS[k] for k in labels])
        inj = injector_position if injector_position is not None else SIX_QUBIT_INJECTOR
    else:
        raise GeometryError(f"unknown electrode layout {layout!r}")
    return ChipGeometry(electrode_centers=tuple(map(tuple, centers)), electrode_labels=tuple(labels),
                        electrode_pitch=electrode_pitch, injector_position=tuple(inj), layout=layout,
                        **kwargs)


# ---- numba kernels ----

@njit(inline="always", error_model="numpy", cache=True)
def ray_box_s(px, py, pz, vx, vy, vz, hx, hy, thick):
    """Time and face of the earliest exit of ``p + v t`` from the box."""
    t = np.inf
    face = -1
    if vz > 0:
        t, face = (thick - pz) / vz, FACE_TOP
    elif vz < 0:
        t, face = -pz / vz, FACE_BOTTOM
    if vx > 0:
        tt = (hx - px) / vx
        if tt < t:
            t, face = tt, FACE_XHI
    elif vx < 0:
        tt = (-hx - px) / vx
        if tt < t:
            t, face = tt, FACE_XLO
    if vy > 0:
        tt = (hy - py) / vy
        if tt < t:
            t, face = tt, FACE_YHI
    elif vy < 0:
        tt = (-hy - py) / vy
        if tt < t:
            t, face = tt, FACE_YLO
    if t < 0.0:
        t = 0.0
    return t, face


@njit(inline="always", error_model="numpy", cache=True)
def hit_point(px, py, pz, vx, vy, vz, t, face, hx, hy, thick):
    """Point reached at time ``t``, clamped to the box and pinned to ``face``."""
    x = min(max(px + vx * t, -hx), hx)
    y = min(max(py + vy * t, -hy), hy)
    z = min(max(pz + vz * t, 0.0), thick)
    if face == FACE_TOP:
        z = thick
    elif face == FACE_BOTTOM:
        z = 0.0
    elif face == FACE_XHI:
        x = hx
    elif face == FACE_XLO:
        x = -hx
    elif face == FACE_YHI:
        y = hy
    elif face == FACE_YLO:
        y = -hy
    return x, y, z


@njit(error_model="numpy", cache=True)
def _ray_box(p, v, hx, hy, thick, out):
    t, face = ray_box_s(p[0], p[1], p[2], v[0], v[1], v[2], hx, hy, thick)
    out[0], out[1], out[2] = hit_point(p[0], p[1], p[2], v[0], v[1], v[2], t, face, hx, hy, thick)
    return t, face


@njit(inline="always", error_model="numpy", cache=True)
def _island_at(x, y, x0, y0, pitch, gap):
    lx = x - x0
    lx -= pitch * math.floor(lx / pitch)
    ly = y - y0
    ly -= pitch * math.floor(ly / pitch)
    g = 0.5 * gap
    return g <= lx <= pitch - g and g <= ly <= pitch - g


@njit(inline="always", error_model="numpy", cache=True)
def _electrode_at(x, y, cell0, cell_n, cell_start, cell_items, centers, half_patch):
    ix = int(math.floor((x - cell0[0]) / cell0[2]))
    iy = int(math.floor((y - cell0[1]) / cell0[2]))
    if ix < 0:
        ix = 0
    elif ix >= cell_n[0]:
        ix = cell_n[0] - 1
    if iy < 0:
        iy = 0
    elif iy >= cell_n[1]:
        iy = cell_n[1] - 1
    c = ix * cell_n[1] + iy
    for k in range(cell_start[c], cell_start[c + 1]):
        e = cell_items[k]
        if abs(x - centers[e, 0]) <= half_patch and abs(y - centers[e, 1]) <= half_patch:
            return e
    return -1


@njit(error_model="numpy", cache=True)
def classify_backside_batch(xs, ys, x0, y0, pitch, gap, out):
    for i in range(xs.shape[0]):
        out[i] = _island_at(xs[i], ys[i], x0, y0, pitch, gap)


@njit(error_model="numpy", cache=True)
def ray_batch(ps, vs, hx, hy, thick, points, times, faces):
    out = np.empty(3)
    for i in range(ps.shape[0]):
        t, f = _ray_box(ps[i], vs[i], hx, hy, thick, out)
        points[i] = out
        times[i] = t
        faces[i] = f
