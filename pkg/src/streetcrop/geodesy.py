"""Spherical-earth geometry on latitude/longitude degrees.

Scalar functions work on :class:`GeoPoint`; the ``*_array`` variants take
numpy arrays of degrees and are used for batch work over many points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6_371_008.8
"""Mean Earth radius in meters."""


class DegenerateBearingError(ValueError):
    """Bearing requested between two coincident points."""


def normalize_lon(lon: float) -> float:
    """Wrap a longitude into (-180, 180]."""
    lon = math.fmod(lon, 360.0)
    if lon <= -180.0:
        lon += 360.0
    elif lon > 180.0:
        lon -= 360.0
    return lon


def normalize_bearing(deg: float) -> float:
    """Wrap an angle into [0, 360)."""
    deg = math.fmod(deg, 360.0)
    if deg < 0.0:
        deg += 360.0
    # fmod of a tiny negative number can round up to exactly 360
    if deg >= 360.0:
        deg = 0.0
    return deg


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(lon))


@dataclass(frozen=True, slots=True)
class EarthModel:
    radius_m: float = EARTH_RADIUS_M

    def __post_init__(self):
        if not self.radius_m > 0:
            raise ValueError("earth radius must be positive")


EARTH = EarthModel()


def distance(a: GeoPoint, b: GeoPoint, earth: EarthModel = EARTH) -> float:
    """Great-circle (haversine) distance in meters."""
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    sin_dlat = math.sin((lat2 - lat1) * 0.5)
    sin_dlon = math.sin(math.radians(b.lon - a.lon) * 0.5)
    h = sin_dlat * sin_dlat + math.cos(lat1) * math.cos(lat2) * sin_dlon * sin_dlon
    # the symmetric form above is exact under swapping a and b
    return 2.0 * earth.radius_m * math.asin(math.sqrt(min(1.0, h)))


def initial_bearing(a: GeoPoint, b: GeoPoint) -> float:
    """Initial great-circle bearing from ``a`` toward ``b``, degrees clockwise from north."""
    if a.lat == b.lat and a.lon == b.lon:
        raise DegenerateBearingError(f"bearing undefined between coincident points {a}")
    lat1 = math.radians(a.lat)
    lat2 = math.radians(b.lat)
    dlon = math.radians(b.lon - a.lon)
    y = math.sin(dlon) * math.cos(lat2)
    x = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon)
    return normalize_bearing(math.degrees(math.atan2(y, x)))


def destination(p: GeoPoint, bearing: float, d: float, earth: EarthModel = EARTH) -> GeoPoint:
    """Point reached after ``d`` meters along the great circle leaving ``p`` at ``bearing``."""
    if d < 0:
        raise ValueError("distance must be non-negative")
    if d == 0:
        return p
    ang = d / earth.radius_m
    theta = math.radians(bearing)
    lat1 = math.radians(p.lat)
    lon1 = math.radians(p.lon)
    sin_lat2 = math.sin(lat1) * math.cos(ang) + math.cos(lat1) * math.sin(ang) * math.cos(theta)
    lat2 = math.asin(max(-1.0, min(1.0, sin_lat2)))
    lon2 = lon1 + math.atan2(
        math.sin(theta) * math.sin(ang) * math.cos(lat1),
        math.cos(ang) - math.sin(lat1) * sin_lat2,
    )
    return GeoPoint(math.degrees(lat2), math.degrees(lon2))


def interpolate_equidistant(
    a: GeoPoint, b: GeoPoint, step: float, earth: EarthModel = EARTH
) -> list[GeoPoint]:
    """Points every ``step`` meters from ``a`` toward ``b``.

    The first point is ``a``; ``b`` itself is only included when the
    segment length is an exact multiple of ``step``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    total = distance(a, b, earth)
    if total == 0.0 or (a.lat == b.lat and a.lon == b.lon):
        return [a]
    theta = initial_bearing(a, b)
    n = math.floor(total / step) + 1
    return [a] + [destination(a, theta, k * step, earth) for k in range(1, n)]


# -- vectorized variants ---------------------------------------------------


def distance_array(lat1, lon1, lat2, lon2, radius_m: float = EARTH_RADIUS_M) -> np.ndarray:
    lat1 = np.radians(lat1)
    lat2 = np.radians(lat2)
    sin_dlat = np.sin((lat2 - lat1) * 0.5)
    sin_dlon = np.sin(np.radians(np.asarray(lon2) - np.asarray(lon1)) * 0.5)
    h = sin_dlat**2 + np.cos(lat1) * np.cos(lat2) * sin_dlon**2
    return 2.0 * radius_m * np.arcsin(np.sqrt(np.minimum(1.0, h)))


def destination_array(lat, lon, bearing, d, radius_m: float = EARTH_RADIUS_M):
    """Vectorized :func:`destination`; returns ``(lat, lon)`` arrays in degrees."""
    ang = np.asarray(d, dtype=np.float64) / radius_m
    theta = np.radians(bearing)
    lat1 = np.radians(lat)
    lon1 = np.radians(lon)
    sin_lat2 = np.sin(lat1) * np.cos(ang) + np.cos(lat1) * np.sin(ang) * np.cos(theta)
    lat2 = np.arcsin(np.clip(sin_lat2, -1.0, 1.0))
    lon2 = lon1 + np.arctan2(
        np.sin(theta) * np.sin(ang) * np.cos(lat1), np.cos(ang) - np.sin(lat1) * sin_lat2
    )
    lon2 = np.degrees(lon2)
    lon2 = np.where(lon2 > 180.0, lon2 - 360.0, lon2)
    lon2 = np.where(lon2 <= -180.0, lon2 + 360.0, lon2)
    return np.degrees(lat2), lon2
