"""City tessellation into square grid cells and the inter-cell distance graph.

Cells are indexed row-major from the northwest corner, 1-based, matching the
numbering used by the flow graphs. Cell side lengths are given in km and
converted to degree extents at the bounding box's center latitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0088  # IUGG mean radius; fixed so distances are bit-stable


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km between two lat/lon points in degrees."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


@dataclass(frozen=True)
class CellId:
    index: int  # 1-based, row-major from the northwest corner
    row: int
    col: int


@dataclass(frozen=True)
class GridSpec:
    min_lat: float
    min_lon: float
    max_lat: float
    max_lon: float
    cell_km: float
    rows: int
    cols: int

    @property
    def n(self):
        return self.rows * self.cols

    @property
    def bbox(self):
        return (self.min_lat, self.min_lon, self.max_lat, self.max_lon)

    def cell(self, index: int) -> CellId:
        if not 1 <= index <= self.n:
            raise ValueError(f"cell index {index} outside [1, {self.n}]")
        row, col = divmod(index - 1, self.cols)
        return CellId(index, row, col)

    def center(self, index: int):
        """Lat/lon of a cell's central point."""
        c = self.cell(index)
        dlat = (self.max_lat - self.min_lat) / self.rows
        dlon = (self.max_lon - self.min_lon) / self.cols
        lat = self.max_lat - (c.row + 0.5) * dlat
        lon = self.min_lon + (c.col + 0.5) * dlon
        return lat, lon

    def to_dict(self):
        return {
            "min_lat": self.min_lat, "min_lon": self.min_lon,
            "max_lat": self.max_lat, "max_lon": self.max_lon,
            "cell_km": self.cell_km, "rows": self.rows, "cols": self.cols,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["min_lat"], d["min_lon"], d["max_lat"], d["max_lon"],
                   d["cell_km"], int(d["rows"]), int(d["cols"]))


def bbox_extents_km(min_lat, min_lon, max_lat, max_lon):
    """(north-south, east-west) bbox extents in km, EW at the center latitude."""
    lat_c = 0.5 * (min_lat + max_lat)
    ns = EARTH_RADIUS_KM * math.radians(max_lat - min_lat)
    ew = EARTH_RADIUS_KM * math.cos(math.radians(lat_c)) * math.radians(max_lon - min_lon)
    return ns, ew


def build_grid(bbox, cell_km) -> GridSpec:
    """Cover the bbox with ceil(extent / cell_km) rows and columns of cells."""
    min_lat, min_lon, max_lat, max_lon = bbox
    if not (max_lat > min_lat and max_lon > min_lon):
        raise ValueError(f"degenerate bbox {bbox}")
    if max_lon > 180.0 or min_lon < -180.0:
        raise ValueError("bboxes spanning the antimeridian are not supported")
    if cell_km <= 0:
        raise ValueError(f"cell_km must be positive, got {cell_km}")
    ns, ew = bbox_extents_km(min_lat, min_lon, max_lat, max_lon)
    # tolerance keeps an exact multiple (e.g. 12.5 km / 2.5 km) from rounding up
    rows = max(1, math.ceil(ns / cell_km - 1e-9))
    cols = max(1, math.ceil(ew / cell_km - 1e-9))
    return GridSpec(min_lat, min_lon, max_lat, max_lon, cell_km, rows, cols)


def bbox_for_grid(rows, cols, cell_km, origin_lat=40.70, origin_lon=-74.02):
    """Inverse of build_grid: a bbox whose tessellation is exactly rows x cols.

    The origin is the bbox's southwest corner. Used by the synthetic
    generator so downstream re-gridding reproduces the planted cells.
    """
    ns_deg = math.degrees(rows * cell_km / EARTH_RADIUS_KM)
    max_lat = origin_lat + ns_deg
    lat_c = origin_lat + ns_deg / 2.0
    ew_deg = math.degrees(cols * cell_km / (EARTH_RADIUS_KM * math.cos(math.radians(lat_c))))
    return (origin_lat, origin_lon, max_lat, origin_lon + ew_deg)


def assign_cell(grid: GridSpec, lat, lon):
    """Map a point to its CellId, or None when it falls outside the bbox.

    Interior cell boundaries are half-open toward the increasing index in
    both axes; the bbox's own south and east edges belong to the last
    row/column so that every bbox point lands in exactly one cell.
    """
    if not (grid.min_lat <= lat <= grid.max_lat and grid.min_lon <= lon <= grid.max_lon):
        return None
    dlat = (grid.max_lat - grid.min_lat) / grid.rows
    dlon = (grid.max_lon - grid.min_lon) / grid.cols
    row = min(int((grid.max_lat - lat) / dlat), grid.rows - 1)
    col = min(int((lon - grid.min_lon) / dlon), grid.cols - 1)
    return CellId(row * grid.cols + col + 1, row, col)


class DistanceGraph:
    """Symmetric n x n matrix of km distances between cell centers."""

    def __init__(self, d: np.ndarray):
        self.d = d

    @property
    def n(self):
        return self.d.shape[0]

    def distance(self, i: int, j: int) -> float:
        return float(self.d[i - 1, j - 1])


def build_distance_graph(grid: GridSpec) -> DistanceGraph:
    centers = [grid.center(i) for i in range(1, grid.n + 1)]
    d = np.zeros((grid.n, grid.n), dtype=np.float64)
    for i in range(grid.n):
        for j in range(i + 1, grid.n):
            km = haversine_km(*centers[i], *centers[j])
            d[i, j] = km
            d[j, i] = km
    return DistanceGraph(d)


def default_geo_threshold_km(cell_km):
    """Threshold that keeps the 8-neighborhood (diagonals included)."""
    return cell_km * math.sqrt(2.0) * 1.01


def geographical_neighbors(grid: GridSpec, dist: DistanceGraph, threshold_km):
    """Per-cell sets of cells whose centers lie within the threshold.

    Self is excluded. The sets are time-independent: they depend only on
    the grid geometry, never on request flow.
    """
    if threshold_km <= 0:
        raise ValueError(f"threshold_km must be positive, got {threshold_km}")
    sets = {}
    for i in range(1, grid.n + 1):
        within = np.nonzero(dist.d[i - 1] <= threshold_km)[0] + 1
        sets[i] = {int(j) for j in within if j != i}
    return sets
