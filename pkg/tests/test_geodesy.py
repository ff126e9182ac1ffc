import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import vector_bearing, vector_distance
from streetcrop.geodesy import (
    EARTH_RADIUS_M,
    DegenerateBearingError,
    EarthModel,
    GeoPoint,
    destination,
    destination_array,
    distance,
    distance_array,
    initial_bearing,
    interpolate_equidistant,
)

lats = st.floats(-85, 85)
lons = st.floats(-179.999, 180)
points = st.builds(GeoPoint, lats, lons)


def angle_diff(a, b):
    return abs((a - b + 180.0) % 360.0 - 180.0)


def test_geopoint_normalizes_longitude():
    assert GeoPoint(0, 190).lon == pytest.approx(-170)
    assert GeoPoint(0, -180).lon == 180.0
    with pytest.raises(ValueError):
        GeoPoint(91, 0)
    with pytest.raises(ValueError):
        GeoPoint(float("nan"), 0)


def test_distance_identity_and_equator_degree():
    p = GeoPoint(12.3, 101.2)
    assert distance(p, p) == 0.0
    # closed form 2*pi*R/360
    assert distance(GeoPoint(0, 0), GeoPoint(0, 1)) == pytest.approx(111195.0802, abs=0.01)
    # 111 194.93 m is the same arc on a 6 371 000 m sphere
    assert distance(GeoPoint(0, 0), GeoPoint(0, 1), EarthModel(6_371_000.0)) == pytest.approx(111194.93, abs=0.01)


def test_distance_matches_vector_oracle():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        lat1, lat2 = rng.uniform(-89, 89, 2)
        lon1, lon2 = rng.uniform(-180, 180, 2)
        d = distance(GeoPoint(lat1, lon1), GeoPoint(lat2, lon2))
        ref = vector_distance(lat1, lon1, lat2, lon2)
        assert d == pytest.approx(ref, rel=1e-6, abs=1e-6)


def test_distance_array_matches_scalar():
    rng = np.random.default_rng(1)
    a = rng.uniform(-80, 80, (2, 50))
    b = rng.uniform(-180, 180, (2, 50))
    got = distance_array(a[0], b[0], a[1], b[1])
    want = [distance(GeoPoint(a[0][i], b[0][i]), GeoPoint(a[1][i], b[1][i])) for i in range(50)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


@given(points, points)
def test_distance_symmetric(a, b):
    assert distance(a, b) == distance(b, a)
    assert distance(a, b) >= 0


@given(points, points, points)
def test_triangle_inequality(a, b, c):
    assert distance(a, c) <= distance(a, b) + distance(b, c) + 1e-6


def test_cardinal_bearings():
    assert initial_bearing(GeoPoint(0, 0), GeoPoint(1, 0)) == pytest.approx(0.0, abs=1e-12)
    assert initial_bearing(GeoPoint(0, 0), GeoPoint(0, 1)) == pytest.approx(90.0, abs=1e-12)
    assert initial_bearing(GeoPoint(0, 0), GeoPoint(-1, 0)) == pytest.approx(180.0, abs=1e-12)
    assert initial_bearing(GeoPoint(0, 0), GeoPoint(0, -1)) == pytest.approx(270.0, abs=1e-12)


def test_bearing_coincident_points_raises():
    with pytest.raises(DegenerateBearingError):
        initial_bearing(GeoPoint(5, 5), GeoPoint(5, 5))


def test_bearing_matches_vector_oracle():
    rng = np.random.default_rng(3)
    for _ in range(500):
        lat1, lat2 = rng.uniform(-80, 80, 2)
        lon1, lon2 = rng.uniform(-180, 180, 2)
        b = initial_bearing(GeoPoint(lat1, lon1), GeoPoint(lat2, lon2))
        assert angle_diff(b, vector_bearing(lat1, lon1, lat2, lon2)) < 1e-7


def test_destination_identity_and_pole():
    p = GeoPoint(10, 20)
    assert destination(p, 123.0, 0.0) == p
    q = destination(GeoPoint(0, 0), 0.0, math.pi * EARTH_RADIUS_M / 2)
    assert q.lat == pytest.approx(90.0, abs=1e-9)


def test_destination_rejects_negative_distance():
    with pytest.raises(ValueError):
        destination(GeoPoint(0, 0), 0, -1)


def test_destination_array_matches_scalar():
    rng = np.random.default_rng(5)
    lat = rng.uniform(-80, 80, 100)
    lon = rng.uniform(-180, 180, 100)
    th = rng.uniform(0, 360, 100)
    d = rng.uniform(0, 1e4, 100)
    la, lo = destination_array(lat, lon, th, d)
    for i in range(100):
        q = destination(GeoPoint(lat[i], lon[i]), th[i], d[i])
        assert la[i] == pytest.approx(q.lat, abs=1e-12)
        assert angle_diff(lo[i], q.lon) < 1e-12


@settings(max_examples=300)
@given(points, st.floats(0, 359.999), st.floats(1.0, 1000.0))
def test_bearing_round_trip(p, theta, d):
    q = destination(p, theta, d)
    assert angle_diff(initial_bearing(p, q), theta) < 1e-6


@settings(max_examples=300)
@given(points, st.floats(0, 359.999), st.floats(0.0, 10_000.0))
def test_distance_round_trip(p, theta, d):
    assert distance(p, destination(p, theta, d)) == pytest.approx(d, abs=1e-3)


def test_interpolate_35m_segment():
    a = GeoPoint(14.0, 100.0)
    b = destination(a, 63.0, 35.0)
    pts = interpolate_equidistant(a, b, 10.0)
    assert len(pts) == 4
    assert pts[0] == a
    for k, p in enumerate(pts):
        assert vector_distance(a.lat, a.lon, p.lat, p.lon) == pytest.approx(10.0 * k, abs=1e-3)


def test_interpolate_zero_length():
    a = GeoPoint(1, 1)
    assert interpolate_equidistant(a, a, 10) == [a]


def test_interpolate_rejects_bad_step():
    with pytest.raises(ValueError):
        interpolate_equidistant(GeoPoint(0, 0), GeoPoint(0, 1), 0)


@settings(max_examples=200)
@given(points, st.floats(0, 359.999), st.floats(0.0, 500.0))
def test_interpolate_count_and_spacing(a, theta, length):
    b = destination(a, theta, length)
    pts = interpolate_equidistant(a, b, 10.0)
    assert len(pts) == math.floor(distance(a, b) / 10.0) + 1
    for p, q in zip(pts, pts[1:]):
        assert vector_distance(p.lat, p.lon, q.lat, q.lon) == pytest.approx(10.0, abs=1e-3)
