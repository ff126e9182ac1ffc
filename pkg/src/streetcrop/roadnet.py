"""Road network ingestion and street-point generation.

Ways come from an Overpass JSON export. Each way is densified into points
a fixed step apart, every street point gets two camera headings facing the
fields on either side of the road, and a field point is projected a fixed
distance along each heading.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

from .geodesy import (
    EARTH,
    DegenerateBearingError,
    EarthModel,
    GeoPoint,
    destination,
    distance,
    initial_bearing,
    interpolate_equidistant,
    normalize_bearing,
)


class OverpassParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DanglingReferenceError(ValueError):
    def __init__(self, way_id: int, node_ids: Sequence[int]):
        super().__init__(f"way {way_id} references missing nodes {list(node_ids)}")
        self.way_id = way_id
        self.node_ids = list(node_ids)


@dataclass(frozen=True)
class OsmWay:
    way_id: int
    nodes: tuple[GeoPoint, ...]
    highway_tag: str = ""

    def __post_init__(self):
        if len(self.nodes) < 2:
            raise ValueError(f"way {self.way_id} has fewer than 2 nodes")


@dataclass(frozen=True)
class RoadNetwork:
    ways: tuple[OsmWay, ...]
    # (min_lat, min_lon, max_lat, max_lon); None for an empty network
    bounds: tuple[float, float, float, float] | None = None

    @classmethod
    def from_ways(cls, ways: Iterable[OsmWay]) -> "RoadNetwork":
        ways = tuple(ways)
        if not ways:
            return cls(ways, None)
        lats = [p.lat for w in ways for p in w.nodes]
        lons = [p.lon for w in ways for p in w.nodes]
        return cls(ways, (min(lats), min(lons), max(lats), max(lons)))

    def n_coordinates(self) -> int:
        return len({p for w in self.ways for p in w.nodes})


@dataclass(frozen=True)
class CandidatePoint:
    """A street point with its camera headings and the field points they face.

    ``headings`` and ``field_points`` are parallel tuples. Freshly derived
    candidates carry two views; land-cover filtering may drop one.
    """

    street: GeoPoint
    bearing: float
    headings: tuple[float, ...]
    field_points: tuple[GeoPoint, ...]
    way_id: int = 0

    def views(self) -> Iterator[tuple[float, GeoPoint]]:
        return zip(self.headings, self.field_points)


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


def parse_overpass(document: str | bytes, highway_allowlist: Iterable[str] | None = None) -> RoadNetwork:
    """Parse an Overpass JSON export into a :class:`RoadNetwork`.

    Only ``node`` and ``way`` elements are looked at; anything else is
    ignored. When ``highway_allowlist`` is given, ways whose ``highway``
    tag is not in it are skipped.
    """
    if isinstance(document, bytes):
        try:
            text = document.decode("utf-8")
        except UnicodeDecodeError as e:
            raise OverpassParseError("document is not valid UTF-8", e.start) from e
    else:
        text = document
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise OverpassParseError(f"malformed JSON: {e.msg}", _byte_offset(text, e.pos)) from e

    if not isinstance(doc, dict) or not isinstance(doc.get("elements"), list):
        raise OverpassParseError('expected a top-level object with an "elements" array', 0)
    allow = None if highway_allowlist is None else set(highway_allowlist)

    coords: dict[int, GeoPoint] = {}
    raw_ways = []
    for i, el in enumerate(doc["elements"]):
        if not isinstance(el, dict):
            raise OverpassParseError(f"element {i} is not an object")
        kind = el.get("type")
        try:
            if kind == "node":
                coords[int(el["id"])] = GeoPoint(float(el["lat"]), float(el["lon"]))
            elif kind == "way":
                raw_ways.append((int(el["id"]), [int(n) for n in el["nodes"]], el.get("tags") or {}))
        except (KeyError, TypeError, ValueError) as e:
            raise OverpassParseError(f"invalid {kind} element at index {i}: {e}") from e

    ways = []
    for way_id, node_ids, tags in raw_ways:
        tag = str(tags.get("highway", ""))
        if allow is not None and tag not in allow:
            continue
        missing = [n for n in node_ids if n not in coords]
        if missing:
            raise DanglingReferenceError(way_id, missing)
        if len(node_ids) < 2:
            raise OverpassParseError(f"way {way_id} has fewer than 2 nodes")
        ways.append(OsmWay(way_id, tuple(coords[n] for n in node_ids), tag))
    return RoadNetwork.from_ways(ways)


def densify(
    network: RoadNetwork, step: float = 10.0, earth: EarthModel = EARTH
) -> Iterator[tuple[GeoPoint, float, int]]:
    """Yield ``(street_point, bearing, way_id)`` every ``step`` meters along each way.

    Order is deterministic: ways in network order, then arc distance. A
    zero-length segment contributes its start node with the bearing of the
    next non-degenerate segment of the same way, or nothing if there is none.
    """
    for way in network.ways:
        nodes = way.nodes
        n_seg = len(nodes) - 1
        for i in range(n_seg):
            a, b = nodes[i], nodes[i + 1]
            try:
                theta = initial_bearing(a, b)
            except DegenerateBearingError:
                theta = None
                for j in range(i + 1, n_seg):
                    try:
                        theta = initial_bearing(nodes[j], nodes[j + 1])
                        break
                    except DegenerateBearingError:
                        continue
                if theta is not None:
                    yield a, theta, way.way_id
                continue
            for p in interpolate_equidistant(a, b, step, earth):
                yield p, theta, way.way_id


def derive_candidate(
    street: GeoPoint, bearing: float, D: float = 30.0, way_id: int = 0, earth: EarthModel = EARTH
) -> CandidatePoint:
    if not D > 0:
        raise ValueError("field distance must be positive")
    bearing = normalize_bearing(bearing)
    headings = (normalize_bearing(bearing + 90.0), normalize_bearing(bearing - 90.0))
    fields = tuple(destination(street, h, D, earth) for h in headings)
    return CandidatePoint(street, bearing, headings, fields, way_id)


def candidates(network: RoadNetwork, step: float = 10.0, D: float = 30.0, earth: EarthModel = EARTH):
    for p, theta, way_id in densify(network, step, earth):
        yield derive_candidate(p, theta, D, way_id, earth)


def _default_point(rec) -> GeoPoint:
    if isinstance(rec, GeoPoint):
        return rec
    if isinstance(rec, tuple) and rec and isinstance(rec[0], GeoPoint):
        return rec[0]
    return rec.point


def _unit_xyz(p: GeoPoint, radius: float) -> tuple[float, float, float]:
    lat = math.radians(p.lat)
    lon = math.radians(p.lon)
    c = math.cos(lat)
    return radius * c * math.cos(lon), radius * c * math.sin(lon), radius * math.sin(lat)


def min_separation_thin(
    records: Iterable,
    min_sep: float = 100.0,
    key: Callable[[object], GeoPoint] | None = None,
    earth: EarthModel = EARTH,
) -> list:
    """Greedy in-order thinning: keep a record iff it is more than ``min_sep``
    meters from every record kept before it.

    Candidates are bucketed by cubes of side ``min_sep`` in earth-centered
    coordinates. Chord length never exceeds arc length, so any conflicting
    pair lies in adjacent cubes.
    """
    if not min_sep > 0:
        raise ValueError("min_sep must be positive")
    key = key or _default_point
    buckets: dict[tuple[int, int, int], list[GeoPoint]] = {}
    kept = []
    for rec in records:
        p = key(rec)
        x, y, z = _unit_xyz(p, earth.radius_m)
        cx, cy, cz = math.floor(x / min_sep), math.floor(y / min_sep), math.floor(z / min_sep)
        conflict = False
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for q in buckets.get((cx + dx, cy + dy, cz + dz), ()):
                        if distance(p, q, earth) <= min_sep:
                            conflict = True
                            break
                    if conflict:
                        break
                if conflict:
                    break
            if conflict:
                break
        if not conflict:
            buckets.setdefault((cx, cy, cz), []).append(p)
            kept.append(rec)
    return kept


# -- candidate CSV ---------------------------------------------------------

CANDIDATE_HEADER = [
    "way_id", "lat", "lon", "bearing_deg", "heading1_deg", "heading2_deg",
    "field1_lat", "field1_lon", "field2_lat", "field2_lon",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_candidates(path, cands: Iterable[CandidatePoint]) -> int:
    """Write candidates as CSV; a dropped view leaves its columns empty."""
    n = 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CANDIDATE_HEADER)
        for c in cands:
            row = [str(c.way_id), _fmt(c.street.lat), _fmt(c.street.lon), _fmt(c.bearing)]
            hs = ["", ""]
            fps = ["", "", "", ""]
            expected = (normalize_bearing(c.bearing + 90.0), normalize_bearing(c.bearing - 90.0))
            for h, fp in c.views():
                slot = 0 if h == expected[0] else 1
                hs[slot] = _fmt(h)
                fps[2 * slot] = _fmt(fp.lat)
                fps[2 * slot + 1] = _fmt(fp.lon)
            w.writerow(row + hs + fps)
            n += 1
    return n


def read_candidates(path) -> list[CandidatePoint]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CANDIDATE_HEADER:
            raise ValueError(f"{path}: unexpected candidate header {reader.fieldnames}")
        for row in reader:
            headings = []
            fields = []
            for k in (1, 2):
                if row[f"heading{k}_deg"]:
                    headings.append(float(row[f"heading{k}_deg"]))
                    fields.append(GeoPoint(float(row[f"field{k}_lat"]), float(row[f"field{k}_lon"])))
            out.append(
                CandidatePoint(
                    GeoPoint(float(row["lat"]), float(row["lon"])),
                    float(row["bearing_deg"]),
                    tuple(headings),
                    tuple(fields),
                    int(row["way_id"]),
                )
            )
    return out
