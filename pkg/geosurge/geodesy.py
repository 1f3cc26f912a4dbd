# File: geosurge/geodesy.py
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from .errors import GeoSurgeError

# Mean Earth radius in kilometers.
EARTH_RADIUS_KM = 6371.0

MAX_DEPTH = 30
_LEAF_CELLS = 1 << MAX_DEPTH

FACE_NAMES = ("+X", "+Y", "+Z", "-X", "-Y", "-Z")


@dataclass(frozen=True)
class GeoPoint:
    """
    A latitude/longitude coordinate in degrees.

    Longitude is normalized into (-180, 180] on construction, so -180 becomes 180.
    """
    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise GeoSurgeError(f"Non-finite coordinate ({lat}, {lon})")
        if not (-90.0 <= lat <= 90.0):
            raise GeoSurgeError(f"Latitude {lat} out of range [-90, 90]")
        lon = math.fmod(lon, 360.0)
        if lon <= -180.0:
            lon += 360.0
        elif lon > 180.0:
            lon -= 360.0
        # object.__setattr__ because the dataclass is frozen
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)

    def to_unit(self) -> UnitVec3:
        lat = math.radians(self.lat)
        lon = math.radians(self.lon)
        c = math.cos(lat)
        return UnitVec3(c * math.cos(lon), c * math.sin(lon), math.sin(lat))


@dataclass(frozen=True)
class UnitVec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        n2 = self.x * self.x + self.y * self.y + self.z * self.z
        if abs(n2 - 1.0) > 1e-9:
            raise GeoSurgeError(f"UnitVec3 has squared norm {n2}, expected 1")

    @classmethod
    def normalized(cls, x: float, y: float, z: float) -> UnitVec3:
        n = math.sqrt(x * x + y * y + z * z)
        if n == 0.0:
            raise GeoSurgeError("Cannot normalize the zero vector")
        return cls(x / n, y / n, z / n)

    def to_point(self) -> GeoPoint:
        lat = math.degrees(math.asin(max(-1.0, min(1.0, self.z))))
        lon = math.degrees(math.atan2(self.y, self.x))
        return GeoPoint(lat, lon)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.z)


@dataclass(frozen=True, order=True)
class CellId:
    """
    A quadtree cell on one cube face.

    ``path`` holds quadrant digits 0..3; digit = u_half + 2 * v_half where a
    half is 1 for the upper half of the parent's (u, v) interval.
    Ordering is (face, path) lexicographic, so ancestors sort before descendants.
    """
    face: int
    path: Tuple[int, ...] = ()

    def __post_init__(self):
        if not (0 <= self.face < 6):
            raise GeoSurgeError(f"Face {self.face} out of range 0..5")
        path = tuple(int(d) for d in self.path)
        if len(path) > MAX_DEPTH:
            raise GeoSurgeError(f"Cell depth {len(path)} exceeds {MAX_DEPTH}")
        if any(d < 0 or d > 3 for d in path):
            raise GeoSurgeError(f"Invalid quadrant digits in {path}")
        object.__setattr__(self, "path", path)

    @property
    def depth(self) -> int:
        return len(self.path)

    def token(self) -> str:
        return f"{self.face}/" + "".join(str(d) for d in self.path)

    def __str__(self) -> str:
        return self.token()

    @classmethod
    def parse(cls, text: str) -> CellId:
        face_str, sep, digits = text.partition("/")
        if not sep or not face_str.isdigit() or (digits and not digits.isdigit()):
            raise GeoSurgeError(f"Malformed cell id {text!r}")
        return cls(int(face_str), tuple(int(ch) for ch in digits))

    def child(self, digit: int) -> CellId:
        return CellId(self.face, self.path + (digit,))

    def ancestor_at(self, depth: int) -> CellId:
        if not (0 <= depth <= self.depth):
            raise GeoSurgeError(f"No ancestor at depth {depth} for {self}")
        return CellId(self.face, self.path[:depth])

    def is_ancestor_of(self, other: CellId) -> bool:
        """True when ``self`` is a (non-strict) quadtree prefix of ``other``."""
        return self.face == other.face and other.path[: self.depth] == self.path

    def ij(self) -> Tuple[int, int]:
        """Integer (i, j) of the cell at its own depth."""
        i = j = 0
        for d in self.path:
            i = (i << 1) | (d & 1)
            j = (j << 1) | (d >> 1)
        return i, j


# -----------------------------------------------------------------------------
# Distances
# -----------------------------------------------------------------------------

def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    h = min(1.0, max(0.0, h))
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


def haversine_km_array(lats1, lons1, lats2, lons2) -> np.ndarray:
    """Vectorized :func:`haversine_km` over numpy arrays (degrees in, km out)."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(x, dtype=np.float64))
                              for x in (lats1, lons1, lats2, lons2))
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


# -----------------------------------------------------------------------------
# Cube projection (linear gnomonic, S2 face/axis convention)
# -----------------------------------------------------------------------------

def face_uv_array(lats, lons) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Project arrays of points onto the cube: returns (face, u, v).

    The face is the dominant axis of the unit vector; ties go to the lowest
    face index. Scalar helpers route through here so bulk and single-point
    results never disagree at cell boundaries.
    """
    lat = np.radians(np.atleast_1d(np.asarray(lats, dtype=np.float64)))
    lon = np.radians(np.atleast_1d(np.asarray(lons, dtype=np.float64)))
    x = np.cos(lat) * np.cos(lon)
    y = np.cos(lat) * np.sin(lon)
    z = np.sin(lat)
    xyz = np.stack([x, y, z], axis=-1)
    a = np.abs(xyz)
    m = a.max(axis=-1, keepdims=True)
    face_per_axis = np.where(a == m, np.arange(3) + 3 * (xyz < 0), 99)
    face = face_per_axis.min(axis=-1).astype(np.int64)

    u = np.empty_like(x)
    v = np.empty_like(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        table = {
            0: (y / x, z / x),
            1: (-x / y, z / y),
            2: (-x / z, -y / z),
            3: (z / x, y / x),
            4: (z / y, -x / y),
            5: (-y / z, -x / z),
        }
    for f, (fu, fv) in table.items():
        sel = face == f
        u[sel] = fu[sel]
        v[sel] = fv[sel]
    return face, np.clip(u, -1.0, 1.0), np.clip(v, -1.0, 1.0)


def face_uv_to_xyz(face: int, u: float, v: float) -> Tuple[float, float, float]:
    if face == 0:
        return 1.0, u, v
    elif face == 1:
        return -u, 1.0, v
    elif face == 2:
        return -u, -v, 1.0
    elif face == 3:
        return -1.0, -v, -u
    elif face == 4:
        return v, -1.0, -u
    else:
        return v, u, -1.0


def to_face_coord(p: GeoPoint) -> Tuple[int, float, float]:
    """Project a point onto its cube face; returns (face, u, v) with u, v in [-1, 1]."""
    face, u, v = face_uv_array(p.lat, p.lon)
    return int(face[0]), float(u[0]), float(v[0])


def _uv_to_index(t: np.ndarray) -> np.ndarray:
    # last interval is closed: t == 1 falls into the top leaf
    return np.minimum(np.floor((t + 1.0) * 0.5 * _LEAF_CELLS).astype(np.int64), _LEAF_CELLS - 1)


def leaf_cells_array(lats, lons) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Depth-30 leaf coordinates (face, i, j) as int64 arrays."""
    face, u, v = face_uv_array(lats, lons)
    return face, _uv_to_index(u), _uv_to_index(v)


def leaf_ij(p: GeoPoint) -> Tuple[int, int, int]:
    face, i, j = leaf_cells_array(p.lat, p.lon)
    return int(face[0]), int(i[0]), int(j[0])


def cell_from_ij(face: int, i: int, j: int, depth: int) -> CellId:
    """CellId at ``depth`` for depth-30 leaf coordinates (i, j)."""
    path = []
    for level in range(1, depth + 1):
        shift = MAX_DEPTH - level
        path.append(((i >> shift) & 1) | (((j >> shift) & 1) << 1))
    return CellId(face, tuple(path))


def cell_id_at_level(p: GeoPoint, depth: int) -> CellId:
    if not (0 <= depth <= MAX_DEPTH):
        raise GeoSurgeError(f"Depth {depth} out of range 0..{MAX_DEPTH}")
    face, i, j = leaf_ij(p)
    return cell_from_ij(face, i, j, depth)


def cell_bounds(c: CellId) -> Tuple[float, float, float, float]:
    """(u_lo, u_hi, v_lo, v_hi) of the cell rectangle on its face."""
    i, j = c.ij()
    size = 2.0 / (1 << c.depth)
    return -1.0 + i * size, -1.0 + (i + 1) * size, -1.0 + j * size, -1.0 + (j + 1) * size


def cell_center(c: CellId) -> GeoPoint:
    u_lo, u_hi, v_lo, v_hi = cell_bounds(c)
    x, y, z = face_uv_to_xyz(c.face, 0.5 * (u_lo + u_hi), 0.5 * (v_lo + v_hi))
    return UnitVec3.normalized(x, y, z).to_point()


def cell_contains(c: CellId, p: GeoPoint) -> bool:
    return cell_id_at_level(p, c.depth) == c


def parent(c: CellId) -> CellId:
    if c.depth == 0:
        raise GeoSurgeError("root cell has no parent")
    return CellId(c.face, c.path[:-1])


# -----------------------------------------------------------------------------
# Spherical means
# -----------------------------------------------------------------------------

def spherical_mean(points: Iterable[GeoPoint]) -> Optional[GeoPoint]:
    """Normalized mean of unit vectors; ``None`` when the mean norm is below 1e-6."""
    sx = sy = sz = 0.0
    n = 0
    for p in points:
        x, y, z = p.to_unit().as_tuple()
        sx += x
        sy += y
        sz += z
        n += 1
    if n == 0:
        return None
    sx, sy, sz = sx / n, sy / n, sz / n
    if math.sqrt(sx * sx + sy * sy + sz * sz) < 1e-6:
        return None
    return UnitVec3.normalized(sx, sy, sz).to_point()


def random_points(rng: np.random.Generator, n: int) -> list:
    """Points drawn uniformly on the sphere."""
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    lats = np.degrees(np.arcsin(np.clip(v[:, 2], -1.0, 1.0)))
    lons = np.degrees(np.arctan2(v[:, 1], v[:, 0]))
    return [GeoPoint(float(a), float(b)) for a, b in zip(lats, lons)]
