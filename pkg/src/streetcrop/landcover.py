"""Land-cover rasters and the cropland / tree-cover candidate filter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .geodesy import EARTH_RADIUS_M, GeoPoint
from .roadnet import CandidatePoint

WORLDCOVER_CLASSES = {
    10: "Tree cover",
    20: "Shrubland",
    30: "Grassland",
    40: "Cropland",
    50: "Built-up",
    60: "Bare / sparse vegetation",
    70: "Snow and ice",
    80: "Permanent water bodies",
    90: "Herbaceous wetland",
    95: "Mangroves",
    100: "Moss and lichen",
}


class GridParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class LegendError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class ClassLegend:
    names: Mapping[int, str] = field(default_factory=lambda: dict(WORLDCOVER_CLASSES))
    cropland: int = 40
    tree_cover: int = 10

    def __post_init__(self):
        if self.cropland == self.tree_cover:
            raise LegendError("cropland and tree cover codes must differ")
        for code in (self.cropland, self.tree_cover):
            if code not in self.names:
                raise LegendError(f"legend lacks class code {code}")


@dataclass(frozen=True, eq=False)
class LandCoverGrid:
    """Row-major class raster; row 0 is the northernmost row."""

    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: int
    cells: np.ndarray

    def __post_init__(self):
        if self.ncols <= 0 or self.nrows <= 0:
            raise ValueError("grid dimensions must be positive")
        if not self.cellsize > 0:
            raise ValueError("cellsize must be positive")
        cells = np.asarray(self.cells)
        if cells.size != self.ncols * self.nrows:
            raise ValueError(f"expected {self.ncols * self.nrows} cells, got {cells.size}")
        cells = cells.reshape(self.nrows, self.ncols).copy()
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    @property
    def shape(self) -> tuple[int, int]:
        return self.nrows, self.ncols

    @property
    def xur(self) -> float:
        return self.xll + self.ncols * self.cellsize

    @property
    def yur(self) -> float:
        return self.yll + self.nrows * self.cellsize

    def contains(self, p: GeoPoint) -> bool:
        return self.xll <= p.lon <= self.xur and self.yll <= p.lat <= self.yur

    def cell_index(self, lat, lon):
        """(row, col) of the containing cell; points on the outer edge map to the edge cell."""
        col = np.floor((np.asarray(lon) - self.xll) / self.cellsize).astype(np.int64)
        row = np.floor((self.yur - np.asarray(lat)) / self.cellsize).astype(np.int64)
        return np.clip(row, 0, self.nrows - 1), np.clip(col, 0, self.ncols - 1)

    def cell_center(self, row, col):
        lat = self.yur - (np.asarray(row) + 0.5) * self.cellsize
        lon = self.xll + (np.asarray(col) + 0.5) * self.cellsize
        return lat, lon

    def __eq__(self, other):
        if not isinstance(other, LandCoverGrid):
            return NotImplemented
        return (
            (self.ncols, self.nrows, self.xll, self.yll, self.cellsize, self.nodata)
            == (other.ncols, other.nrows, other.xll, other.yll, other.cellsize, other.nodata)
            and np.array_equal(self.cells, other.cells)
        )


_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def parse_grid(text: str, legend: ClassLegend | None = None) -> LandCoverGrid:
    """Parse ESRI ASCII grid text. ``legend=None`` skips class validation."""
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise GridParseError("empty grid file", 1)
    header: dict[str, str] = {}
    lineno = 0
    while lineno < len(lines) and len(header) < len(_HEADER_KEYS):
        line = lines[lineno].strip()
        lineno += 1
        if not line:
            continue
        parts = line.split()
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            raise GridParseError(f"expected header key, got {parts[0]!r}", lineno)
        if len(parts) != 2:
            raise GridParseError(f"malformed header line {line!r}", lineno)
        header[key] = parts[1]
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise GridParseError(f"missing header fields {missing}", lineno)
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        xll = float(header["xllcorner"])
        yll = float(header["yllcorner"])
        cellsize = float(header["cellsize"])
        nodata = int(float(header["nodata_value"]))
    except ValueError as e:
        raise GridParseError(f"bad header value: {e}", lineno) from e

    rows = []
    for i in range(lineno, len(lines)):
        line = lines[i].strip()
        if not line:
            continue
        try:
            vals = [int(v) for v in line.split()]
        except ValueError as e:
            raise GridParseError(f"non-integer cell value: {e}", i + 1) from e
        if len(vals) != ncols:
            raise GridParseError(f"expected {ncols} values, got {len(vals)}", i + 1)
        rows.append(vals)
    if len(rows) != nrows:
        raise GridParseError(f"expected {nrows} rows, got {len(rows)}", len(lines))
    cells = np.array(rows, dtype=np.int64)
    if legend is not None:
        valid = np.isin(cells, list(legend.names) + [nodata])
        if not valid.all():
            bad = sorted(set(cells[~valid].tolist()))
            raise LegendError(f"class codes not in legend: {bad}")
    dtype = np.uint8 if cells.size and cells.min() >= 0 and cells.max() <= 255 else np.int32
    return LandCoverGrid(ncols, nrows, xll, yll, cellsize, nodata, cells.astype(dtype))


def load_grid(path, legend: ClassLegend | None = ClassLegend()) -> LandCoverGrid:
    with open(path) as f:
        return parse_grid(f.read(), legend)


def write_grid(path, grid: LandCoverGrid) -> None:
    with open(path, "w") as f:
        f.write(f"ncols {grid.ncols}\n")
        f.write(f"nrows {grid.nrows}\n")
        f.write(f"xllcorner {grid.xll!r}\n")
        f.write(f"yllcorner {grid.yll!r}\n")
        f.write(f"cellsize {grid.cellsize!r}\n")
        f.write(f"NODATA_value {grid.nodata}\n")
        for row in grid.cells:
            f.write(" ".join(map(str, row.tolist())))
            f.write("\n")


# -- radius queries --------------------------------------------------------


def _neighborhood(grid: LandCoverGrid, lat: np.ndarray, lon: np.ndarray, radius: float, radius_m: float):
    """Candidate cells around each point and whether each lies within ``radius``.

    Returns (rows, cols, inside), each shaped (n_points, n_offsets); cells
    outside the raster are marked not inside.
    """
    row0, col0 = grid.cell_index(lat, lon)
    cell_m = math.radians(grid.cellsize) * radius_m
    max_abs_lat = min(89.0, float(np.max(np.abs(lat))) + grid.cellsize) if lat.size else 0.0
    k_row = int(math.ceil(radius / cell_m)) + 1
    k_col = int(math.ceil(radius / (cell_m * math.cos(math.radians(max_abs_lat))))) + 1
    dr, dc = np.meshgrid(np.arange(-k_row, k_row + 1), np.arange(-k_col, k_col + 1), indexing="ij")
    rows = row0[:, None] + dr.ravel()[None, :]
    cols = col0[:, None] + dc.ravel()[None, :]
    valid = (rows >= 0) & (rows < grid.nrows) & (cols >= 0) & (cols < grid.ncols)
    clat, clon = grid.cell_center(rows, cols)
    # local equirectangular distance; sub-millimetre error at these scales
    dy = np.radians(clat - lat[:, None]) * radius_m
    dx = np.radians(clon - lon[:, None]) * radius_m * np.cos(np.radians(lat))[:, None]
    inside = valid & (dx * dx + dy * dy <= radius * radius)
    # the containing cell always counts, so radius 0 is a point query
    inside |= (rows == row0[:, None]) & (cols == col0[:, None])
    return np.clip(rows, 0, grid.nrows - 1), np.clip(cols, 0, grid.ncols - 1), inside


def classes_within_radius(
    grid: LandCoverGrid, p: GeoPoint, radius: float = 10.0, radius_m: float = EARTH_RADIUS_M
) -> frozenset[int]:
    """Class codes of the containing cell plus every cell whose center is
    within ``radius`` meters of ``p``; nodata is never reported."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if not grid.contains(p):
        raise OutOfBoundsError(f"{p} lies outside the grid")
    rows, cols, inside = _neighborhood(grid, np.array([p.lat]), np.array([p.lon]), radius, radius_m)
    codes = grid.cells[rows[0][inside[0]], cols[0][inside[0]]]
    return frozenset(int(c) for c in codes if c != grid.nodata)


def field_point_mask(
    grid: LandCoverGrid,
    legend: ClassLegend,
    lat: np.ndarray,
    lon: np.ndarray,
    radius: float = 10.0,
    radius_m: float = EARTH_RADIUS_M,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized filter test.

    Returns ``(passes, in_bounds)``: a point passes when cropland is
    present and tree cover absent within ``radius``.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    in_bounds = (lon >= grid.xll) & (lon <= grid.xur) & (lat >= grid.yll) & (lat <= grid.yur)
    passes = np.zeros(lat.shape, dtype=bool)
    if not in_bounds.any():
        return passes, in_bounds
    la, lo = lat[in_bounds], lon[in_bounds]
    rows, cols, inside = _neighborhood(grid, la, lo, radius, radius_m)
    codes = grid.cells[rows, cols]
    has_crop = (inside & (codes == legend.cropland)).any(axis=1)
    has_tree = (inside & (codes == legend.tree_cover)).any(axis=1)
    passes[in_bounds] = has_crop & ~has_tree
    return passes, in_bounds


@dataclass
class FilterStats:
    candidates_in: int = 0
    candidates_kept: int = 0
    views_in: int = 0
    views_kept: int = 0
    views_out_of_bounds: int = 0


def filter_candidates(
    points: Iterable[CandidatePoint],
    grid: LandCoverGrid,
    legend: ClassLegend = ClassLegend(),
    radius: float = 10.0,
    stats: FilterStats | None = None,
    batch_size: int = 65536,
) -> Iterator[CandidatePoint]:
    """Keep candidates with at least one field point that sees cropland and
    no tree cover; each survivor carries only its passing views.

    Field points outside the grid are dropped and counted in ``stats``.
    """
    stats = stats if stats is not None else FilterStats()
    batch: list[CandidatePoint] = []

    def flush():
        lat = np.array([fp.lat for c in batch for fp in c.field_points])
        lon = np.array([fp.lon for c in batch for fp in c.field_points])
        passes, in_bounds = field_point_mask(grid, legend, lat, lon, radius)
        stats.views_in += len(lat)
        stats.views_out_of_bounds += int((~in_bounds).sum())
        i = 0
        for c in batch:
            n = len(c.field_points)
            ok = passes[i:i + n]
            i += n
            stats.candidates_in += 1
            if ok.all():
                kept = c
            elif ok.any():
                kept = CandidatePoint(
                    c.street,
                    c.bearing,
                    tuple(h for h, k in zip(c.headings, ok) if k),
                    tuple(fp for fp, k in zip(c.field_points, ok) if k),
                    c.way_id,
                )
            else:
                continue
            stats.candidates_kept += 1
            stats.views_kept += len(kept.field_points)
            yield kept

    for c in points:
        batch.append(c)
        if len(batch) >= batch_size:
            yield from flush()
            batch = []
    if batch:
        yield from flush()
