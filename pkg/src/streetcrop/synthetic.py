"""A small synthetic country for desk runs of the whole pipeline.

Everything is a deterministic function of one seed: a Voronoi parcel map
with land-cover classes, a road network crossing it, the true crop class
of every cropland cell, a satellite time-series cube with class-specific
phenology, and expert labels. A scripted street-view transport and a
stand-in window classifier play the parts of the image API and the CNN.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import HarmonicConfig, RAW_BANDS, features_from_cube
from .geodesy import GeoPoint, destination
from .labeling import CropClass, GroundReference, N_CLASSES, sliding_windows, write_expert_labels
from .landcover import LandCoverGrid, write_grid
from .svclient import Image, ImageRequest, NOT_AVAILABLE, TransientError

CROPLAND, TREE, GRASS, BUILT = 40, 10, 30, 50
NODATA = 255
PRIORS = np.array([0.65, 0.08, 0.08, 0.07, 0.12])
SAMPLE_DAYS = np.arange(0.0, 181.0, 5.0)

# base, amplitude, peak day, width (days), early-season water
PHENOLOGY = np.array([
    [0.08, 0.80, 100.0, 28.0, 0.70],  # rice: flooded paddies, mid-season peak
    [0.22, 0.50, 135.0, 45.0, 0.00],  # cassava: slow, late green-up
    [0.10, 0.70, 70.0, 22.0, 0.00],   # maize: short early cycle
    [0.40, 0.45, 115.0, 70.0, 0.00],  # sugarcane: green most of the season
    [0.25, 0.30, 80.0, 50.0, 0.15],   # other
])

# reflectance = offset + gain * greenness + water_gain * water
_BAND_MODEL = {
    "RedEdge4": (0.09, 0.32, -0.06),
    "SWIR1": (0.30, -0.12, -0.18),
    "SWIR2": (0.24, -0.14, -0.16),
    "NIR": (0.10, 0.38, -0.07),
    "Green": (0.05, 0.04, 0.03),
}


@dataclass(frozen=True)
class Variability:
    """Spread of crop behaviour between fields, within a field and between observations."""

    peak_days: float = 15.0
    amp_rel: float = 0.225
    base_abs: float = 0.06
    width_rel: float = 0.225
    cell_peak_days: float = 3.0
    obs_noise: float = 0.0225


def parcel_params(classes: np.ndarray, rng: np.random.Generator, var: Variability = Variability()) -> np.ndarray:
    """Per-field phenology drawn around each class signature; (n, 5)."""
    p = PHENOLOGY[classes].copy()
    n = len(classes)
    p[:, 0] += rng.normal(0, var.base_abs, n)
    p[:, 1] *= 1 + rng.normal(0, var.amp_rel, n)
    p[:, 2] += rng.normal(0, var.peak_days, n)
    p[:, 3] *= np.clip(1 + rng.normal(0, var.width_rel, n), 0.4, None)
    p[:, 4] *= rng.uniform(0.6, 1.2, n)
    return p


def _reflectance(params: np.ndarray, t: np.ndarray, peak_jitter=0.0) -> dict:
    base, amp, peak, width, water = (params[:, i:i + 1] for i in range(5))
    g = np.clip(base + amp * np.exp(-0.5 * ((t - (peak + peak_jitter)) / width) ** 2), 0.0, 1.2)
    w = water * np.exp(-t / 30.0)
    return {b: off + gain * g + wgain * w for b, (off, gain, wgain) in _BAND_MODEL.items()}


def simulate_series(params: np.ndarray, t: np.ndarray, rng: np.random.Generator, var: Variability = Variability()):
    """Band reflectances and cloud probabilities for each row of ``params``.

    Returns ({band: (n, n_t)}, cloud (n, n_t)). Cloudy observations are
    brightened so that masking matters.
    """
    n = params.shape[0]
    clean = _reflectance(params, t, rng.normal(0, var.cell_peak_days, (n, 1)))
    cloudiness = rng.beta(0.6, 1.6, t.size)
    cloud = np.clip(100 * (cloudiness + rng.normal(0, 0.08, (n, t.size))), 0, 100)
    haze = 0.25 * (cloud / 100) ** 2
    bands = {}
    for b in RAW_BANDS:
        v = clean[b] + haze + rng.normal(0, var.obs_noise, (n, t.size))
        bands[b] = np.maximum(v, 0.01)
    return bands, cloud


def prototype_features(cfg: HarmonicConfig = HarmonicConfig()) -> np.ndarray:
    """Features of each class signature under clear skies with no noise; (5, 35)."""
    clean = _reflectance(PHENOLOGY, SAMPLE_DAYS)
    return features_from_cube(SAMPLE_DAYS, clean, np.zeros((N_CLASSES, SAMPLE_DAYS.size)), cfg)


def sample_references(
    n: int,
    seed: int,
    label_noise: float = 0.0,
    priors=PRIORS,
    var: Variability = Variability(),
    cfg: HarmonicConfig = HarmonicConfig(),
):
    """Features and labels for ``n`` independent fields.

    Returns (X, y_true, y_observed) where ``y_observed`` has a fraction
    ``label_noise`` of labels replaced by a different random class.
    """
    rng = np.random.default_rng(seed)
    y = rng.choice(N_CLASSES, size=n, p=np.asarray(priors) / np.sum(priors))
    bands, cloud = simulate_series(parcel_params(y, rng, var), SAMPLE_DAYS, rng, var)
    X = features_from_cube(SAMPLE_DAYS, bands, cloud, cfg)
    # a field whose fit failed is re-drawn with fresh weather until it fits
    bad = np.flatnonzero(np.isnan(X[:, 0]))
    while bad.size:
        b2, c2 = simulate_series(parcel_params(y[bad], rng, var), SAMPLE_DAYS, rng, var)
        X[bad] = features_from_cube(SAMPLE_DAYS, b2, c2, cfg)
        bad = bad[np.isnan(X[bad, 0])]
    y_obs = y.copy()
    flip = rng.random(n) < label_noise
    y_obs[flip] = (y[flip] + rng.integers(1, N_CLASSES, flip.sum())) % N_CLASSES
    return X, y, y_obs


# -- country ---------------------------------------------------------------


@dataclass(frozen=True)
class CountrySpec:
    size: int = 240          # cells per side
    cellsize: float = 1e-4   # degrees
    xll: float = 100.0
    yll: float = 15.0
    parcel_cells: float = 9.0
    n_roads: int = 7         # per direction
    n_expert_candidates: int = 1500


def _voronoi(size: int, seeds: np.ndarray, chunk: int = 16) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size]
    rc = np.stack([rows.ravel() + 0.5, cols.ravel() + 0.5], axis=1)
    out = np.empty(rc.shape[0], dtype=np.int64)
    step = chunk * size
    for i in range(0, rc.shape[0], step):
        d = ((rc[i:i + step, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
        out[i:i + step] = d.argmin(axis=1)
    return out.reshape(size, size)


def _road_polylines(spec: CountrySpec, rng: np.random.Generator):
    """Roads as lists of fractional (row, col), alternating horizontal and vertical."""
    lines = []
    spacing = spec.size / spec.n_roads
    for horizontal in (True, False):
        for k in range(spec.n_roads):
            across = spacing * (k + 0.5) + rng.uniform(-3, 3)
            along = [4.0 + rng.uniform(0, 1)]
            while along[-1] < spec.size - 60:
                along.append(along[-1] + rng.uniform(35, 60))
            along.append(spec.size - 4.0 - rng.uniform(0, 1))
            offs = across + rng.uniform(-2, 2, len(along))
            pts = [(o, a) if horizontal else (a, o) for a, o in zip(along, offs)]
            lines.append(pts)
    return lines


def _to_geo(spec: CountrySpec, row: float, col: float) -> GeoPoint:
    yur = spec.yll + spec.size * spec.cellsize
    return GeoPoint(yur - row * spec.cellsize, spec.xll + col * spec.cellsize)


def overpass_document(spec: CountrySpec, lines) -> dict:
    elements, node_id = [], 1
    for way_id, pts in enumerate(lines, start=1):
        refs = []
        for r, c in pts:
            p = _to_geo(spec, r, c)
            elements.append({"type": "node", "id": node_id, "lat": p.lat, "lon": p.lon})
            refs.append(node_id)
            node_id += 1
        tag = "tertiary" if way_id % 3 == 0 else "unclassified"
        elements.append({"type": "way", "id": way_id, "nodes": refs, "tags": {"highway": tag}})
    return {"version": 0.6, "generator": "streetcrop synthetic", "elements": elements}


def make_country(outdir, seed: int = 0, spec: CountrySpec = CountrySpec(), var: Variability = Variability()) -> dict:
    """Write the synthetic country into ``outdir`` and return its file paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    r_parcel, r_roads, r_series, r_expert = (np.random.default_rng(s) for s in ss.spawn(4))
    n = spec.size

    n_parcels = int(round(n * n / spec.parcel_cells ** 2))
    seeds = r_parcel.uniform(0, n, (n_parcels, 2))
    parcel = _voronoi(n, seeds)
    cover = r_parcel.choice([CROPLAND, TREE, GRASS, BUILT], size=n_parcels, p=[0.72, 0.12, 0.08, 0.08])
    crop = r_parcel.choice(N_CLASSES, size=n_parcels, p=PRIORS)
    cells = cover[parcel].astype(np.int64)

    lines = _road_polylines(spec, r_roads)
    for pts in lines:
        for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
            k = int(max(abs(r1 - r0), abs(c1 - c0)) * 4) + 1
            rr = np.floor(np.linspace(r0, r1, k)).astype(int)
            cc = np.floor(np.linspace(c0, c1, k)).astype(int)
            cells[np.clip(rr, 0, n - 1), np.clip(cc, 0, n - 1)] = BUILT

    truth = np.where(cells == CROPLAND, crop[parcel], NODATA)

    params = parcel_params(crop, r_series, var)[parcel.ravel()]
    bands, cloud = simulate_series(params, SAMPLE_DAYS, r_series, var)

    grid = LandCoverGrid(n, n, spec.xll, spec.yll, spec.cellsize, NODATA, cells)
    truth_grid = LandCoverGrid(n, n, spec.xll, spec.yll, spec.cellsize, NODATA, truth)

    # expert points: uniform inside random cropland cells
    crop_cells = np.flatnonzero(truth.ravel() != NODATA)
    pick = r_expert.choice(crop_cells, size=spec.n_expert_candidates, replace=False)
    rows, cols = np.divmod(pick, n)
    experts = []
    for i, (r, c) in enumerate(zip(rows, cols)):
        p = _to_geo(spec, r + r_expert.uniform(0.1, 0.9), c + r_expert.uniform(0.1, 0.9))
        experts.append(GroundReference(f"E{i:05d}", p, CropClass(int(truth[r, c])), "expert"))

    paths = {
        "roads": out / "roads.json",
        "landcover": out / "landcover.asc",
        "truth": out / "truth.asc",
        "timeseries": out / "timeseries.npz",
        "expert_labels": out / "expert_labels.csv",
    }
    paths["roads"].write_text(json.dumps(overpass_document(spec, lines), indent=1))
    write_grid(paths["landcover"], grid)
    write_grid(paths["truth"], truth_grid)
    shape = (n, n, SAMPLE_DAYS.size)
    np.savez(
        paths["timeseries"],
        t=SAMPLE_DAYS,
        cloud=cloud.reshape(shape).astype(np.float32),
        **{b: bands[b].reshape(shape).astype(np.float32) for b in RAW_BANDS},
    )
    write_expert_labels(paths["expert_labels"], experts)
    return paths


# -- scripted street view and window classifier ----------------------------


def _stream(seed: int, key: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


class SyntheticStreetView:
    """Transport that photographs the synthetic country.

    Whether imagery exists, its capture date and any transient failure are
    pure functions of (seed, request_id), so results do not depend on
    fetch order or worker count. The image bytes record the scene, which
    is the true class of the cell the camera faces at ``field_distance``.
    """

    def __init__(self, truth: LandCoverGrid, seed: int = 0, field_distance: float = 30.0,
                 availability: float = 0.85, off_season: float = 0.10, flaky: float = 0.03):
        self.truth = truth
        self.seed = seed
        self.field_distance = field_distance
        self.availability = availability
        self.off_season = off_season
        self.flaky = flaky
        self._failed_once: set[str] = set()

    def get(self, request: ImageRequest):
        rid = request.request_id
        u = _stream(self.seed, "sv:" + rid).random(4)
        if u[0] < self.flaky and rid not in self._failed_once:
            self._failed_once.add(rid)
            raise TransientError("scripted timeout")
        if u[1] >= self.availability:
            return NOT_AVAILABLE
        start, end = request.date_window
        if u[2] < self.off_season:
            capture = dt.date(start.year - 1, 1 + int(u[3] * 12), 1)
        else:
            capture = start + dt.timedelta(days=int(u[3] * ((end - start).days + 1)))
        fp = destination(request.point, request.heading, self.field_distance)
        scene = -1
        if self.truth.contains(fp):
            r, c = self.truth.cell_index(fp.lat, fp.lon)
            v = int(self.truth.cells[r, c])
            scene = -1 if v == self.truth.nodata else v
        data = json.dumps({"request_id": rid, "scene": scene}, sort_keys=True).encode()
        return Image(data, capture)


def classify_images(
    images: dict,
    seed: int = 0,
    size: tuple[int, int] = (640, 640),
    win: int = 300,
    stride: int = 50,
    accuracy: float = 0.9,
    uncertain: float = 0.08,
    missed_fields: float = 0.03,
) -> dict[str, np.ndarray]:
    """Stand-in for the field/not-field and crop-type CNNs.

    ``images`` maps image id to bytes from :class:`SyntheticStreetView`.
    Non-field scenes are dropped, as are a few real fields. Each kept
    image gets per-window softmax vectors whose dominant class is the
    true one with probability ``accuracy``; a fraction ``uncertain`` of
    images never reaches a confident window.
    """
    n_win = len(sliding_windows(size[0], size[1], win, stride))
    out = {}
    for rid in sorted(images):
        scene = json.loads(images[rid])["scene"]
        rng = _stream(seed, "cnn:" + rid)
        u = rng.random(3)
        if scene < 0 or u[0] < missed_fields:
            continue
        cls = scene if u[1] < accuracy else (scene + 1 + int(rng.integers(0, N_CLASSES - 1))) % N_CLASSES
        confident_share = 0.0 if u[2] < uncertain else rng.uniform(0.4, 0.9)
        probs = np.empty((n_win, N_CLASSES))
        for w in range(n_win):
            if rng.random() < confident_share:
                top, p = cls, rng.uniform(0.905, 0.99)
            else:
                top = cls if rng.random() < 0.6 else int(rng.integers(0, N_CLASSES))
                p = rng.uniform(0.35, 0.88)
            rest = rng.dirichlet(np.ones(N_CLASSES - 1)) * (1 - p)
            probs[w] = np.insert(rest, top, p)
        out[rid] = probs
    return out
