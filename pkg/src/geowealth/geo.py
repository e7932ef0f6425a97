"""Geodesic primitives and a grid-accelerated spatial index over lat/lon points.

Distances are great-circle (haversine) on a sphere with the IUGG mean Earth
radius. At the sub-100 km scales used for graph construction the spherical
error versus an ellipsoid is well below the 2-10 km coordinate noise the
rest of the pipeline has to absorb, so no ellipsoidal model is provided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088  # IUGG mean radius


def _normalize_lon(lon: float) -> float:
    """Wrap a longitude in degrees into [-180, 180)."""
    return (lon + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class GeoPoint:
    """A latitude/longitude pair in degrees.

    Latitude must lie in [-90, 90]; longitude is normalized into
    [-180, 180) on construction, so two points with equivalent wrapped
    longitudes compare equal.
    """

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lon", _normalize_lon(self.lon))


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points in km.

    Symmetric, non-negative, and exactly zero for identical (normalized)
    coordinates.
    """
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    dlat = math.radians(b.lat - a.lat)
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    h = min(1.0, max(0.0, h))
    return 2.0 * EARTH_RADIUS_KM * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))


def destination(origin: GeoPoint, bearing: float, distance_km: float) -> GeoPoint:
    """Great-circle destination from `origin` along `bearing` (radians, from
    north, clockwise) for `distance_km`.

    Inverse of :func:`haversine_km` to ~1e-6 relative error for distances up
    to a few hundred km.
    """
    if distance_km < 0:
        raise ValueError(f"distance must be non-negative, got {distance_km}")
    if distance_km == 0.0:
        return origin
    delta = distance_km / EARTH_RADIUS_KM
    lat1 = math.radians(origin.lat)
    lon1 = math.radians(origin.lon)
    sin_lat2 = math.sin(lat1) * math.cos(delta) + math.cos(lat1) * math.sin(delta) * math.cos(bearing)
    sin_lat2 = min(1.0, max(-1.0, sin_lat2))
    lat2 = math.asin(sin_lat2)
    lon2 = lon1 + math.atan2(
        math.sin(bearing) * math.sin(delta) * math.cos(lat1),
        math.cos(delta) - math.sin(lat1) * sin_lat2,
    )
    return GeoPoint(math.degrees(lat2), math.degrees(lon2))


class SpatialIndex:
    """Immutable grid index over a fixed point set for radius and kNN queries.

    Points are bucketed into equal-angle lat/lon cells; queries gather the
    cells that can intersect the search disk and then filter candidates with
    exact haversine distances, so results match a brute-force scan. The
    index is safe for concurrent reads after construction.
    """

    def __init__(self, points: Sequence[GeoPoint], cell_size_deg: float = 0.5):
        if cell_size_deg <= 0:
            raise ValueError("cell_size_deg must be positive")
        self._points = tuple(points)
        self._cell = float(cell_size_deg)
        self._n_lat = max(1, math.ceil(180.0 / self._cell))
        self._n_lon = max(1, math.ceil(360.0 / self._cell))
        n = len(self._points)
        lats = np.array([p.lat for p in self._points], dtype=np.float64)
        lons = np.array([p.lon for p in self._points], dtype=np.float64)
        self._lat_rad = np.radians(lats)
        self._lon_rad = np.radians(lons)
        self._cos_lat = np.cos(self._lat_rad)
        buckets: dict[tuple[int, int], list[int]] = {}
        for i in range(n):
            buckets.setdefault(self._cell_of(lats[i], lons[i]), []).append(i)
        self._cells = {key: np.asarray(ids, dtype=np.int64) for key, ids in buckets.items()}

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> tuple[GeoPoint, ...]:
        return self._points

    def _cell_of(self, lat: float, lon: float) -> tuple[int, int]:
        ci = min(int((lat + 90.0) // self._cell), self._n_lat - 1)
        cj = int((lon + 180.0) // self._cell) % self._n_lon
        return ci, cj

    def _candidate_ids(self, center: GeoPoint, radius_km: float) -> np.ndarray:
        """Ids from every grid cell that can intersect the search disk."""
        if not self._cells:
            return np.empty(0, dtype=np.int64)
        delta = radius_km / EARTH_RADIUS_KM  # angular radius, radians
        dlat_deg = math.degrees(delta) + 1e-9
        ci_lo = max(0, int((max(center.lat - dlat_deg, -90.0) + 90.0) // self._cell))
        ci_hi = min(self._n_lat - 1, int((min(center.lat + dlat_deg, 90.0) + 90.0) // self._cell))

        cos_c = math.cos(math.radians(center.lat))
        sin_d = math.sin(min(delta, math.pi / 2.0))
        if abs(center.lat) + dlat_deg >= 90.0 or sin_d >= cos_c:
            # Disk reaches a pole (or wraps): scan every longitude column.
            cols = range(self._n_lon)
        else:
            dlon_deg = math.degrees(math.asin(sin_d / cos_c)) + 1e-9
            cj_lo = math.floor((center.lon - dlon_deg + 180.0) / self._cell)
            cj_hi = math.floor((center.lon + dlon_deg + 180.0) / self._cell)
            if cj_hi - cj_lo + 1 >= self._n_lon:
                cols = range(self._n_lon)
            else:
                cols = [c % self._n_lon for c in range(cj_lo, cj_hi + 1)]

        found = [
            self._cells[(ci, cj)]
            for ci in range(ci_lo, ci_hi + 1)
            for cj in cols
            if (ci, cj) in self._cells
        ]
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(found)

    def _distances(self, ids: np.ndarray, center: GeoPoint) -> np.ndarray:
        lat0 = math.radians(center.lat)
        lon0 = math.radians(center.lon)
        dlat = self._lat_rad[ids] - lat0
        dlon = self._lon_rad[ids] - lon0
        h = np.sin(dlat / 2.0) ** 2 + math.cos(lat0) * self._cos_lat[ids] * np.sin(dlon / 2.0) ** 2
        np.clip(h, 0.0, 1.0, out=h)
        return 2.0 * EARTH_RADIUS_KM * np.arctan2(np.sqrt(h), np.sqrt(1.0 - h))

    def radius_query(self, center: GeoPoint, radius_km: float) -> list[tuple[int, float]]:
        """All (id, distance) with distance <= radius_km, ascending by
        distance, ties broken by ascending id."""
        if radius_km <= 0:
            raise ValueError("radius must be positive")
        ids = np.unique(self._candidate_ids(center, radius_km))
        if ids.size == 0:
            return []
        dist = self._distances(ids, center)
        keep = dist <= radius_km
        ids, dist = ids[keep], dist[keep]
        order = np.lexsort((ids, dist))
        return [(int(ids[i]), float(dist[i])) for i in order]

    def knn_query(self, center: GeoPoint, k: int, max_radius_km: float) -> list[tuple[int, float]]:
        """Up to k nearest (id, distance) with distance <= max_radius_km.

        Indexed points at exactly zero distance from the center are skipped,
        so querying from an indexed location never returns that location
        itself. Ordering matches :meth:`radius_query`.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        if max_radius_km <= 0:
            raise ValueError("max_radius must be positive")
        ids = np.unique(self._candidate_ids(center, max_radius_km))
        if ids.size == 0:
            return []
        dist = self._distances(ids, center)
        keep = (dist <= max_radius_km) & (dist > 0.0)
        ids, dist = ids[keep], dist[keep]
        order = np.lexsort((ids, dist))[:k]
        return [(int(ids[i]), float(dist[i])) for i in order]
