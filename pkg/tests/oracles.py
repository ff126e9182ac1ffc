"""Independent reference implementations used only by the tests.

None of these call into the code paths they check.
"""

import itertools
import math

import numpy as np

R = 6_371_008.8


def vector_distance(lat1, lon1, lat2, lon2, radius=R):
    """Central angle from the cross and dot products of unit vectors."""
    def unit(lat, lon):
        la, lo = math.radians(lat), math.radians(lon)
        return np.array([math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la)])

    u, v = unit(lat1, lon1), unit(lat2, lon2)
    return radius * math.atan2(np.linalg.norm(np.cross(u, v)), float(np.dot(u, v)))


def vector_bearing(lat1, lon1, lat2, lon2):
    """Initial bearing from the local north/east frame at the start point."""
    la, lo = math.radians(lat1), math.radians(lon1)
    p = np.array([math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la)])
    la2, lo2 = math.radians(lat2), math.radians(lon2)
    q = np.array([math.cos(la2) * math.cos(lo2), math.cos(la2) * math.sin(lo2), math.sin(la2)])
    east = np.array([-math.sin(lo), math.cos(lo), 0.0])
    north = np.cross(p, east)
    tangent = q - np.dot(q, p) * p
    return math.degrees(math.atan2(np.dot(tangent, east), np.dot(tangent, north))) % 360.0


def brute_thin(points, min_sep):
    """O(n^2) greedy thinning over (lat, lon) tuples."""
    kept = []
    for i, (lat, lon) in enumerate(points):
        if all(vector_distance(lat, lon, points[j][0], points[j][1]) > min_sep for j in kept):
            kept.append(i)
    return kept


def brute_classes(cells, yur, xll, cellsize, lat, lon, radius, nodata):
    """Scan every cell; include those whose center is within radius (haversine) and the containing cell."""
    nrows, ncols = cells.shape
    out = set()
    crow = min(nrows - 1, int(math.floor((yur - lat) / cellsize)))
    ccol = min(ncols - 1, int(math.floor((lon - xll) / cellsize)))
    for r in range(nrows):
        for c in range(ncols):
            clat = yur - (r + 0.5) * cellsize
            clon = xll + (c + 0.5) * cellsize
            if (r, c) == (crow, ccol) or vector_distance(lat, lon, clat, clon) <= radius:
                if cells[r, c] != nodata:
                    out.add(int(cells[r, c]))
    return out


def mhp_from_pattern(pattern, n_classes=5):
    """Expected MHP outcome for a vote pattern: entry k is the class window k votes for, or None."""
    counts = [0] * n_classes
    for v in pattern:
        if v is not None:
            counts[v] += 1
    best = max(counts)
    if best == 0 or counts.count(best) > 1:
        return None
    return counts.index(best)


def all_vote_patterns(max_windows=5, classes=(0, 1, 2)):
    options = (None,) + tuple(classes)
    for k in range(1, max_windows + 1):
        yield from itertools.product(options, repeat=k)


def manual_f1(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def brute_classes_local(cells, yur, xll, cellsize, lat, lon, radius, nodata, window=3):
    """Like brute_classes but only scans a small block of cells around the point."""
    nrows, ncols = cells.shape
    crow = int(math.floor((yur - lat) / cellsize))
    ccol = int(math.floor((lon - xll) / cellsize))
    out = set()
    for r in range(max(0, crow - window), min(nrows, crow + window + 1)):
        for c in range(max(0, ccol - window), min(ncols, ccol + window + 1)):
            clat = yur - (r + 0.5) * cellsize
            clon = xll + (c + 0.5) * cellsize
            if (r, c) == (crow, ccol) or vector_distance(lat, lon, clat, clon) <= radius:
                if cells[r, c] != nodata:
                    out.add(int(cells[r, c]))
    return out


def overpass_point_count(doc, step):
    """Equidistant points a road document yields: floor(d/step)+1 per segment."""
    nodes = {e["id"]: (e["lat"], e["lon"]) for e in doc["elements"] if e["type"] == "node"}
    total = 0
    for e in doc["elements"]:
        if e["type"] != "way":
            continue
        pts = [nodes[i] for i in e["nodes"]]
        for (a, b) in zip(pts[:-1], pts[1:]):
            total += int(vector_distance(a[0], a[1], b[0], b[1]) // step) + 1
    return total


def vector_distance_many(lat1, lon1, lat2, lon2, radius=R):
    """Array form of ``vector_distance``."""
    def unit(lat, lon):
        la, lo = np.radians(lat), np.radians(lon)
        return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1)

    u, v = unit(np.asarray(lat1), np.asarray(lon1)), unit(np.asarray(lat2), np.asarray(lon2))
    return radius * np.arctan2(np.linalg.norm(np.cross(u, v), axis=-1), np.sum(u * v, axis=-1))
