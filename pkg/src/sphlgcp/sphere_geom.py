"""
Geometry on the sphere: points, great-circle distances, latitude/longitude
integration grids with exact cell areas, and knot placement.

All coordinates are in degrees; distances are in km on a perfect sphere of
radius ``EARTH_RADIUS_KM``.  Arrays of locations are ``(N, 2)`` with columns
``(lon, lat)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np

EARTH_RADIUS_KM = 6371.0

# float slack when checking that a resolution tiles a region
_TILE_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid region, grid or knot request."""


def normalize_lon(lon):
    """Map longitudes (degrees) to the half-open range [-180, 180)."""
    out = np.mod(np.asarray(lon, dtype=float) + 180.0, 360.0) - 180.0
    # np.mod can return 360.0 - tiny -> 180.0 after the shift
    out = np.where(out >= 180.0, out - 360.0, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SpherePoint:
    lon: float
    lat: float

    def __post_init__(self):
        lat = float(self.lat)
        if not -90.0 <= lat <= 90.0:
            raise GeometryError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(float(self.lon)))

    def as_array(self) -> np.ndarray:
        return np.array([self.lon, self.lat])


def as_locs(points) -> np.ndarray:
    """Coerce a sequence of `SpherePoint` or an ``(N, 2)`` array to ``(N, 2)``."""
    if isinstance(points, SpherePoint):
        return points.as_array()[None, :]
    if isinstance(points, np.ndarray):
        locs = np.asarray(points, dtype=float)
    else:
        points = list(points)
        if points and isinstance(points[0], SpherePoint):
            locs = np.array([[p.lon, p.lat] for p in points], dtype=float)
        else:
            locs = np.asarray(points, dtype=float)
    locs = np.atleast_2d(locs)
    if locs.shape[-1] != 2:
        raise GeometryError(f"locations must have shape (N, 2), got {locs.shape}")
    return locs


def haversine(lon1, lat1, lon2, lat2, radius=EARTH_RADIUS_KM):
    """
    Great-circle distance, broadcasting over its arguments.

    Uses the haversine term inside ``2 * atan2(sqrt(h), sqrt(1 - h))``, which
    stays accurate both for tiny separations and for near-antipodal pairs.
    """
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(np.asarray(lon2, dtype=float) - np.asarray(lon1, dtype=float))
    h = np.sin(0.5 * dphi) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(0.5 * dlam) ** 2
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * radius * np.arctan2(np.sqrt(h), np.sqrt(1.0 - h))


def great_circle_distance(a: SpherePoint, b: SpherePoint, radius: float = EARTH_RADIUS_KM) -> float:
    """Great-circle distance in km between two points."""
    return float(haversine(a.lon, a.lat, b.lon, b.lat, radius))


def distance_matrix(locs_a, locs_b=None, radius: float = EARTH_RADIUS_KM) -> np.ndarray:
    """
    Pairwise great-circle distances.

    Parameters
    ----------
    locs_a : (N, 2) array-like
    locs_b : (M, 2) array-like, optional
        Defaults to `locs_a`; the result is then exactly symmetric with a
        zero diagonal.

    Returns
    -------
    d : (N, M) ndarray of km
    """
    a = as_locs(locs_a)
    if locs_b is None:
        d = haversine(a[:, None, 0], a[:, None, 1], a[None, :, 0], a[None, :, 1], radius)
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
        return d
    b = as_locs(locs_b)
    return haversine(a[:, None, 0], a[:, None, 1], b[None, :, 0], b[None, :, 1], radius)


@dataclass(frozen=True)
class Region:
    """
    A lon/lat box.  ``lon_min > lon_max`` (after normalization) means the box
    wraps the date line; ``lon_max - lon_min == 360`` is the full circle.
    """

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        if not (-90.0 <= self.lat_min < self.lat_max <= 90.0):
            raise GeometryError(
                f"need -90 <= lat_min < lat_max <= 90, got [{self.lat_min}, {self.lat_max}]"
            )
        if self.lon_width <= 0.0:
            raise GeometryError("region has zero longitudinal extent")

    @classmethod
    def full_sphere(cls) -> "Region":
        return cls(-180.0, 180.0, -90.0, 90.0)

    @property
    def lon_width(self) -> float:
        raw = float(self.lon_max) - float(self.lon_min)
        if raw >= 360.0 - _TILE_TOL:
            return 360.0
        return float(np.mod(raw, 360.0))

    @property
    def lat_height(self) -> float:
        return float(self.lat_max) - float(self.lat_min)

    @property
    def is_full_sphere(self) -> bool:
        return self.lon_width == 360.0 and self.lat_min == -90.0 and self.lat_max == 90.0

    @property
    def west(self) -> float:
        """Western edge normalized to [-180, 180)."""
        return normalize_lon(self.lon_min)

    def area(self, radius: float = EARTH_RADIUS_KM) -> float:
        """Analytic area of the box in km^2."""
        return (
            radius**2
            * math.radians(self.lon_width)
            * (math.sin(math.radians(self.lat_max)) - math.sin(math.radians(self.lat_min)))
        )

    def contains(self, locs) -> np.ndarray:
        locs = as_locs(locs)
        offset = np.mod(locs[:, 0] - self.west, 360.0)
        in_lon = offset <= self.lon_width + _TILE_TOL
        in_lat = (locs[:, 1] >= self.lat_min - _TILE_TOL) & (locs[:, 1] <= self.lat_max + _TILE_TOL)
        return in_lon & in_lat


@dataclass(frozen=True)
class GridCell:
    center: SpherePoint
    area: float
    index: int


class Cells:
    """An arbitrary collection of integration cells (e.g. a masked grid)."""

    def __init__(self, locs, area):
        self.locs = as_locs(locs)
        self.area = np.asarray(area, dtype=float)
        if self.area.shape != (self.locs.shape[0],):
            raise GeometryError("one area per location required")
        if np.any(self.area <= 0):
            raise GeometryError("cell areas must be positive")

    def __len__(self) -> int:
        return self.locs.shape[0]

    def __getitem__(self, k: int) -> GridCell:
        k = range(len(self))[k]
        return GridCell(SpherePoint(*self.locs[k]), float(self.area[k]), k)

    def __iter__(self) -> Iterator[GridCell]:
        for k in range(len(self)):
            yield self[k]

    @property
    def total_area(self) -> float:
        return float(self.area.sum())

    @property
    def cell_weights(self) -> np.ndarray:
        """Areas rescaled so the weights sum to the number of cells."""
        return self.area / self.area.mean()

    def subset(self, keep) -> "Cells":
        return Cells(self.locs[keep], self.area[keep])


class Grid(Cells):
    """
    Regular lon/lat tiling of a `Region` with per-cell areas.

    Cells are stored row-major: latitude rows south to north, longitude
    running eastward from the region's western edge inside each row.
    """

    def __init__(self, region: Region, resolution_deg: float, nlon: int, nlat: int,
                 radius: float = EARTH_RADIUS_KM):
        self.region = region
        self.resolution_deg = float(resolution_deg)
        self.nlon = nlon
        self.nlat = nlat
        self.radius = radius
        res = self.resolution_deg
        self.lon_edges = region.west + res * np.arange(nlon + 1)
        self.lat_edges = region.lat_min + res * np.arange(nlat + 1)
        lon_c = normalize_lon(self.lon_edges[:-1] + 0.5 * res)
        lat_c = self.lat_edges[:-1] + 0.5 * res
        lon2, lat2 = np.meshgrid(lon_c, lat_c)
        band = np.diff(np.sin(np.radians(self.lat_edges)))
        row_area = radius**2 * math.radians(res) * band
        super().__init__(np.column_stack([lon2.ravel(), lat2.ravel()]), np.repeat(row_area, nlon))

    def cell_index(self, locs, tol: float = 1e-6) -> np.ndarray:
        """
        Map cell-center coordinates to cell indices; -1 for points that are
        not within `tol` degrees of a center.
        """
        locs = as_locs(locs)
        res = self.resolution_deg
        i = (np.mod(locs[:, 0] - self.region.west, 360.0)) / res - 0.5
        j = (locs[:, 1] - self.region.lat_min) / res - 0.5
        ii = np.rint(i).astype(np.int64)
        jj = np.rint(j).astype(np.int64)
        ok = (
            (np.abs(i - ii) * res <= tol) & (np.abs(j - jj) * res <= tol)
            & (ii >= 0) & (ii < self.nlon) & (jj >= 0) & (jj < self.nlat)
        )
        return np.where(ok, jj * self.nlon + ii, -1)


def _tile_count(extent: float, res: float, axis: str) -> int:
    ratio = extent / res
    n = int(math.floor(ratio + _TILE_TOL))
    if n < 1:
        raise GeometryError(f"resolution {res} deg leaves no complete cell along {axis}")
    if abs(ratio - n) > _TILE_TOL * max(1.0, ratio):
        warnings.warn(
            f"{axis} extent {extent} deg is not a multiple of {res} deg; "
            f"tiling {n} complete cells from the lower edge",
            stacklevel=3,
        )
    return n


def build_grid(region: Region, resolution_deg: float, radius: float = EARTH_RADIUS_KM) -> Grid:
    """
    Tile `region` with half-open ``[lo, lo + res)`` cells.

    When the extent is not a multiple of the resolution only the complete
    cells counted from the western/southern edge are kept (with a warning);
    e.g. the 79.75 x 30.5 degree eastern Pacific box at 0.5 deg gives
    159 x 61 cells.
    """
    if resolution_deg <= 0:
        raise GeometryError("resolution must be positive")
    nlon = _tile_count(region.lon_width, resolution_deg, "longitude")
    nlat = _tile_count(region.lat_height, resolution_deg, "latitude")
    return Grid(region, resolution_deg, nlon, nlat, radius)


def _fibonacci_sphere(m: int) -> np.ndarray:
    golden = (1.0 + 5.0**0.5) / 2.0
    i = np.arange(m)
    lat = np.degrees(np.arcsin(1.0 - 2.0 * (i + 0.5) / m))
    lon = normalize_lon(360.0 * i / golden)
    return np.column_stack([np.atleast_1d(lon), lat])


def place_knots(region: Region, m: int, resolution_deg: float | None = None) -> np.ndarray:
    """
    Deterministic, roughly uniform knot locations inside `region`.

    The full sphere gets a Fibonacci lattice.  Other boxes get ``nrow``
    latitude rows at equally spaced midpoints, with ``nrow`` chosen from the
    box's aspect ratio (longitude scaled by the cosine of the central
    latitude) and the `m` knots split as evenly as possible between rows,
    each row again at equally spaced midpoints.

    Parameters
    ----------
    region : Region
    m : int
        Number of knots, at least 1.
    resolution_deg : float, optional
        If given, `m` may not exceed the number of cells of the grid at
        this resolution.

    Returns
    -------
    knots : (m, 2) ndarray of (lon, lat)
    """
    if m < 1:
        raise GeometryError("need at least one knot")
    if resolution_deg is not None:
        n_cells = len(build_grid(region, resolution_deg))
        if m > n_cells:
            raise GeometryError(f"{m} knots requested but the grid only has {n_cells} cells")
    if region.is_full_sphere:
        return _fibonacci_sphere(m)

    mid_lat = math.radians(0.5 * (region.lat_min + region.lat_max))
    width = region.lon_width * max(math.cos(mid_lat), 1e-3)
    height = region.lat_height
    nrow = int(min(m, max(1, round(math.sqrt(m * height / width)))))
    base, extra = divmod(m, nrow)
    # the extra knots go to the middle rows so the layout stays symmetric-ish
    order = sorted(range(nrow), key=lambda r: (abs(r - (nrow - 1) / 2.0), r))
    counts = [base] * nrow
    for r in order[:extra]:
        counts[r] += 1

    rows = []
    for r, k in enumerate(counts):
        lat = region.lat_min + height * (r + 0.5) / nrow
        lon = region.west + region.lon_width * (np.arange(k) + 0.5) / k
        rows.append(np.column_stack([normalize_lon(lon), np.full(k, lat)]))
    return np.vstack(rows)
