"""Staged pipeline: road network to ground references to a crop-type map.

Each stage reads the documented files of its predecessors from the work
directory and writes its own. A stamp (hash of the stage's config
sections and input files) lets an unchanged re-run skip the work. Stages
in the image funnel append input/output counts to ``funnel.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from filelock import FileLock, Timeout

from . import synthetic
from .config import ConfigError, PipelineConfig
from .features import (
    RAW_BANDS,
    BandSeries,
    feature_names,
    features_for_points,
    features_from_cube,
    read_features,
    read_timeseries,
    write_features,
)
from .forest import (
    ForestParams,
    RandomForestModel,
    evaluate,
    evaluate_predictions,
    train,
    write_report,
)
from .geodesy import EARTH, distance_array
from .labeling import (
    CLASS_LABELS,
    JoinError,
    LabelStats,
    N_CLASSES,
    ingest_expert_labels,
    label_images,
    read_references,
    read_window_predictions,
    sliding_windows,
    split_dataset,
    write_references,
    write_window_predictions,
    WindowPrediction,
)
from .landcover import ClassLegend, FilterStats, LandCoverGrid, filter_candidates, load_grid, write_grid
from .roadnet import candidates, parse_overpass, read_candidates, write_candidates
from .svclient import (
    Budget,
    ImageCache,
    MockTransport,
    StreetViewTransport,
    estimate_cost,
    fetch_all,
    fetched_images,
    plan_with_fields,
    read_plan,
    subsample,
    write_plan,
)

log = logging.getLogger(__name__)

MAP_NODATA = 255
FUNNEL_ORDER = ("densify", "filter", "plan", "fetch", "field_classifier", "mhp", "features")


class DependencyError(RuntimeError):
    """An upstream artifact is missing; names the stage that makes it."""

    def __init__(self, stage: str, artifact: str, producer: str):
        super().__init__(f"stage {stage!r} needs {artifact}; run stage {producer!r} first")
        self.stage = stage
        self.artifact = artifact
        self.producer = producer


class AlignmentError(ValueError):
    pass


class PipelineLockedError(RuntimeError):
    pass


# -- funnel ----------------------------------------------------------------


@dataclass
class FunnelEntry:
    stage: str
    n_in: int
    n_out: int
    unit_in: str
    unit_out: str
    details: dict = field(default_factory=dict)


@dataclass
class FunnelReport:
    entries: list[FunnelEntry] = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "FunnelReport":
        path = Path(path)
        if not path.exists():
            return cls()
        return cls([FunnelEntry(**e) for e in json.loads(path.read_text())])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps([asdict(e) for e in self.entries], indent=1) + "\n")

    def upsert(self, entry: FunnelEntry) -> None:
        self.entries = [e for e in self.entries if e.stage != entry.stage] + [entry]
        self.entries.sort(key=lambda e: FUNNEL_ORDER.index(e.stage))

    def get(self, stage: str) -> FunnelEntry | None:
        return next((e for e in self.entries if e.stage == stage), None)

    def problems(self) -> list[str]:
        """Broken links between consecutive stages and any filter stage that grew."""
        out = []
        for a, b in zip(self.entries, self.entries[1:]):
            if FUNNEL_ORDER.index(b.stage) == FUNNEL_ORDER.index(a.stage) + 1 and b.n_in != a.n_out:
                out.append(f"{b.stage} input {b.n_in} != {a.stage} output {a.n_out}")
        for e in self.entries:
            if e.stage != "densify" and e.n_out > e.n_in:
                out.append(f"{e.stage} output {e.n_out} exceeds input {e.n_in}")
        return out

    def table(self) -> str:
        rows = [f"{'stage':<17}{'in':>10}{'out':>10}  unit"]
        for e in self.entries:
            unit = e.unit_out if e.unit_in == e.unit_out else f"{e.unit_in} -> {e.unit_out}"
            rows.append(f"{e.stage:<17}{e.n_in:>10}{e.n_out:>10}  {unit}")
        return "\n".join(rows)


# -- stage registry ----------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    run: Callable
    sections: tuple[str, ...]
    inputs: tuple[str, ...]        # required config paths
    optional: tuple[str, ...]      # optional config paths
    upstream: tuple[str, ...]      # work-directory artifacts


@dataclass
class StageResult:
    stage: str
    entries: list[FunnelEntry]
    outputs: list[str]
    skipped: bool = False
    summary: dict = field(default_factory=dict)
    seconds: float = 0.0


EXPERT_SPLITS = ("expert_train.csv", "expert_val.csv", "expert_test.csv")

PRODUCERS = {
    "candidates.csv": "densify",
    "filtered.csv": "filter",
    "plan.csv": "plan",
    "fetched.csv": "fetch",
    "refs.csv": "label",
    **{s: "label" for s in EXPERT_SPLITS},
    "features.csv": "features",
    "cell_features.npy": "features",
    "model.bin": "train",
}


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(cfg: PipelineConfig, stage: str, key: str) -> Path:
    p = cfg.path(key)
    if p is None:
        raise ConfigError(f"stage {stage!r} needs [paths] {key}")
    if not p.exists():
        raise ConfigError(f"[paths] {key} = {p} does not exist")
    return p


def _stage_key(name: str, st: Stage, cfg: PipelineConfig) -> str:
    wd = Path(cfg.workdir)
    files = {}
    for k in st.inputs:
        files[k] = _file_digest(_require(cfg, name, k))
    for k in st.optional:
        p = cfg.path(k)
        if p is not None and p.exists():
            files[k] = _file_digest(p)
    for a in st.upstream:
        p = wd / a
        if not p.exists():
            raise DependencyError(name, a, PRODUCERS.get(a, "?"))
        files[a] = _file_digest(p)
    blob = json.dumps(
        {"stage": name, "seed": cfg.seed, "config": cfg.fingerprint(*st.sections), "files": files},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def run_stage(name: str, cfg: PipelineConfig, force: bool = False) -> StageResult:
    """Run one stage unless its stamp shows the same inputs were already processed."""
    if name not in STAGES:
        raise ConfigError(f"unknown stage {name!r}")
    st = STAGES[name]
    wd = Path(cfg.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    key = _stage_key(name, st, cfg)
    stamp_path = wd / ".stamps" / f"{name}.json"
    funnel_path = wd / "funnel.json"
    funnel = FunnelReport.load(funnel_path)

    if not force and stamp_path.exists():
        stamp = json.loads(stamp_path.read_text())
        if stamp["key"] == key and all((wd / o).exists() for o in stamp["outputs"]):
            entries = [FunnelEntry(**e) for e in stamp["entries"]]
            for e in entries:
                funnel.upsert(e)
            funnel.save(funnel_path)
            log.info("%s: inputs unchanged, reusing outputs", name)
            return StageResult(name, entries, stamp["outputs"], True, stamp.get("summary", {}))

    t0 = time.perf_counter()
    log.info("%s: running", name)
    entries, outputs, summary = st.run(cfg, wd)
    for e in entries:
        funnel.upsert(e)
    funnel.save(funnel_path)
    stamp_path.parent.mkdir(exist_ok=True)
    stamp_path.write_text(json.dumps({
        "key": key,
        "outputs": outputs,
        "entries": [asdict(e) for e in entries],
        "summary": summary,
    }, indent=1, default=str))
    return StageResult(name, entries, outputs, False, summary, time.perf_counter() - t0)


def run_stages(names: Sequence[str], cfg: PipelineConfig, force: bool = False) -> list[StageResult]:
    """Run stages in order while holding the work-directory lock."""
    wd = Path(cfg.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(wd / ".streetcrop.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise PipelineLockedError(f"another pipeline is running in {wd}") from None
    try:
        return [run_stage(n, cfg, force) for n in names]
    finally:
        lock.release()


# -- stages ------------------------------------------------------------------


def _densify(cfg: PipelineConfig, wd: Path):
    net = parse_overpass(cfg.path("roads").read_bytes(), cfg.highway_allowlist)
    n = write_candidates(wd / "candidates.csv", candidates(net, cfg.step_m, cfg.field_distance_m))
    e = FunnelEntry("densify", n, 2 * n, "street points", "views", {"ways": len(net.ways)})
    return [e], ["candidates.csv"], {"ways": len(net.ways), "street_points": n}


def _filter(cfg: PipelineConfig, wd: Path):
    grid = load_grid(cfg.path("landcover"), cfg.legend)
    stats = FilterStats()
    kept = filter_candidates(read_candidates(wd / "candidates.csv"), grid, cfg.legend, cfg.filter_radius_m, stats)
    write_candidates(wd / "filtered.csv", kept)
    e = FunnelEntry("filter", stats.views_in, stats.views_kept, "views", "views", {
        "candidates_in": stats.candidates_in,
        "candidates_kept": stats.candidates_kept,
        "views_out_of_bounds": stats.views_out_of_bounds,
    })
    return [e], ["filtered.csv"], asdict(stats)


def _plan(cfg: PipelineConfig, wd: Path):
    plan, fields = plan_with_fields(read_candidates(wd / "filtered.csv"), cfg.season, cfg.image_size)
    n_views = len(plan)
    seen, unique = set(), []
    for r in plan:
        if r.request_id not in seen:
            seen.add(r.request_id)
            unique.append(r)
    plan = subsample(unique, cfg.max_requests, cfg.seed)
    write_plan(wd / "plan.csv", plan, fields)
    cost = estimate_cost(len(plan), Budget(cfg.budget.unit_cost_usd_per_1000))
    e = FunnelEntry("plan", n_views, len(plan), "views", "requests", {
        "duplicates": n_views - len(unique),
        "estimated_usd": str(cost),
    })
    return [e], ["plan.csv"], {"requests": len(plan), "estimated_usd": str(cost)}


def make_transport(cfg: PipelineConfig):
    if cfg.transport == "mock":
        return MockTransport()
    if cfg.transport == "synthetic":
        truth = load_grid(_require(cfg, "fetch", "truth"), legend=None)
        return synthetic.SyntheticStreetView(truth, cfg.seed, cfg.field_distance_m)
    try:
        return StreetViewTransport()
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _fetch(cfg: PipelineConfig, wd: Path):
    plan, fields = read_plan(wd / "plan.csv")
    cache = ImageCache(cfg.cache_path)
    report = fetch_all(plan, make_transport(cfg), cache, cfg.rate, cfg.budget, cfg.workers, backoff=cfg.backoff_s)
    got = fetched_images(cache, plan)
    write_plan(wd / "fetched.csv", got, fields)
    statuses = [cache.get(r.request_id)["status"] for r in plan if cache.get(r.request_id)]
    e = FunnelEntry("fetch", len(plan), len(got), "requests", "images in season", {
        "unavailable": statuses.count("unavailable"),
        "excluded_out_of_season": statuses.count("excluded"),
        "failed": statuses.count("failed"),
        "spend_usd_this_run": str(report.spend_usd),
    })
    return [e], ["fetched.csv"], {
        "new": report.fetched, "cached": report.cached, "spend_usd": str(report.spend_usd),
    }


def _window_predictions(cfg: PipelineConfig, wd: Path, fetched) -> dict:
    p = cfg.path("window_predictions")
    if p is not None:
        if not p.exists():
            raise ConfigError(f"[paths] window_predictions = {p} does not exist")
        return read_window_predictions(p)
    if cfg.transport != "synthetic":
        raise ConfigError("no [paths] window_predictions given; the image classifier output is required")
    cache = ImageCache(cfg.cache_path)
    images = {r.request_id: cache.read_image(r.request_id) for r in fetched}
    probs = synthetic.classify_images(images, cfg.seed, cfg.image_size, cfg.window, cfg.stride)
    rects = sliding_windows(cfg.image_size[0], cfg.image_size[1], cfg.window, cfg.stride)
    write_window_predictions(wd / "windows.csv", {
        rid: [WindowPrediction(rect, tuple(row)) for rect, row in zip(rects, arr)] for rid, arr in probs.items()
    })
    # read back so labels come from exactly what the file holds
    return read_window_predictions(wd / "windows.csv")


def _label(cfg: PipelineConfig, wd: Path):
    fetched, fields = read_plan(wd / "fetched.csv")
    windows = _window_predictions(cfg, wd, fetched)
    expected = len(sliding_windows(cfg.image_size[0], cfg.image_size[1], cfg.window, cfg.stride))
    odd = sum(1 for a in windows.values() if a.shape[0] != expected)
    if odd:
        log.warning("%d images do not have the %d windows a %dpx/%dpx scan gives", odd, expected, cfg.window,
                    cfg.stride)
    missing = sorted(k for k in windows if k not in fields)
    if missing:
        raise JoinError(missing)
    stats = LabelStats()
    refs = label_images(windows, fields, cfg.tau, stats)
    write_references(wd / "refs.csv", refs)

    experts = []
    if cfg.path("expert_labels") is not None:
        experts = ingest_expert_labels(_require(cfg, "label", "expert_labels"))
    splits = split_dataset(experts, cfg.split, cfg.seed, cfg.min_sep_m) if experts else ([], [], [])
    for name, part in zip(EXPERT_SPLITS, splits):
        write_references(wd / name, part)

    entries = [
        FunnelEntry("field_classifier", len(fetched), len(windows), "images in season", "field images"),
        FunnelEntry("mhp", stats.images, stats.labelled, "field images", "ground references",
                    {"rejected": stats.rejected, "tau": cfg.tau}),
    ]
    outputs = ["refs.csv", *EXPERT_SPLITS] + (["windows.csv"] if (wd / "windows.csv").exists() else [])
    counts = np.bincount([r.label for r in refs], minlength=N_CLASSES)
    summary = {
        "references": len(refs),
        "per_class": dict(zip(CLASS_LABELS, counts.tolist())),
        "experts": len(experts),
        "expert_splits": [len(s) for s in splits],
    }
    return entries, outputs, summary


def _all_references(wd: Path):
    auto = read_references(wd / "refs.csv")
    experts = {name: read_references(wd / name) for name in EXPERT_SPLITS}
    return auto, experts


def load_cube(path, grid: LandCoverGrid):
    """Time-series cube saved as .npz with ``t``, ``cloud`` and one array per raw band, each (rows, cols, n_t)."""
    with np.load(path) as z:
        missing = [k for k in ("t", "cloud", *RAW_BANDS) if k not in z]
        if missing:
            raise ConfigError(f"{path}: missing arrays {', '.join(missing)}")
        t = z["t"].astype(np.float64)
        cloud = z["cloud"]
        bands = {b: z[b] for b in RAW_BANDS}
    if cloud.shape[:2] != grid.shape:
        raise AlignmentError(f"time-series cube is {cloud.shape[:2]} cells, land-cover grid is {grid.shape}")
    return t, bands, cloud


def _features(cfg: PipelineConfig, wd: Path):
    auto, experts = _all_references(wd)
    points = {}
    for r in auto + [r for part in experts.values() for r in part]:
        if r.image_id in points:
            raise ConfigError(f"reference id {r.image_id!r} appears twice across sources")
        points[r.image_id] = r.point

    ts_path = _require(cfg, "features", "timeseries")
    outputs = ["features.csv"]
    summary = {}
    if ts_path.suffix == ".npz":
        grid = load_grid(_require(cfg, "features", "landcover"), cfg.legend)
        t, bands, cloud = load_cube(ts_path, grid)
        series = {}
        for pid, p in points.items():
            if not grid.contains(p):
                continue
            r, c = grid.cell_index(p.lat, p.lon)
            series[pid] = {
                b: BandSeries(b, t, bands[b][r, c].astype(np.float64), cloud[r, c].astype(np.float64))
                for b in RAW_BANDS
            }
        feats, failed = features_for_points(series, cfg.harmonic)
        failed.update({pid: "outside the time-series cube" for pid in points if pid not in series})

        crop = grid.cells == cfg.legend.cropland
        X = np.full(grid.shape + (len(feature_names(cfg.harmonic)),), np.nan)
        X[crop] = features_from_cube(
            t, {b: bands[b][crop] for b in RAW_BANDS}, cloud[crop], cfg.harmonic
        )
        np.save(wd / "cell_features.npy", X)
        outputs.append("cell_features.npy")
        summary["cropland_cells"] = int(crop.sum())
        summary["cells_without_features"] = int(np.isnan(X[crop][:, 0]).sum())
    else:
        series = read_timeseries(ts_path)
        feats, failed = features_for_points({pid: series[pid] for pid in points if pid in series}, cfg.harmonic)
        failed.update({pid: "no time series" for pid in points if pid not in series})

    write_features(wd / "features.csv", {pid: feats[pid] for pid in sorted(feats)})
    n_auto_ok = sum(1 for r in auto if r.image_id in feats)
    e = FunnelEntry("features", len(auto), n_auto_ok, "ground references", "ground references",
                    {"expert_failed": sum(1 for pid in failed if pid not in {r.image_id for r in auto})})
    for pid in sorted(failed)[:5]:
        log.info("no features for %s: %s", pid, failed[pid])
    summary.update({"points": len(points), "failed": len(failed)})
    return [e], outputs, summary


def _far_from(refs, guard, min_sep: float) -> np.ndarray:
    keep = np.ones(len(refs), dtype=bool)
    if not refs or not guard:
        return keep
    lat = np.array([r.point.lat for r in refs])
    lon = np.array([r.point.lon for r in refs])
    for g in guard:
        keep &= distance_array(lat, lon, g.point.lat, g.point.lon, EARTH.radius_m) > min_sep
    return keep


def training_set(cfg: PipelineConfig, wd: Path):
    """Feature matrix and labels for training, with the ids used.

    Automatic references within ``min_sep`` of a test point are left out
    so evaluation never sees a field the model trained on.
    """
    feats = read_features(wd / "features.csv")
    auto, experts = _all_references(wd)
    chosen = []
    info = {}
    if cfg.train_source in ("auto", "both"):
        guard = experts["expert_test.csv"]
        keep = _far_from(auto, guard, cfg.min_sep_m)
        info["auto_near_test"] = int((~keep).sum())
        chosen += [r for r, k in zip(auto, keep) if k]
    if cfg.train_source in ("expert", "both"):
        chosen += experts["expert_train.csv"]
    chosen = [r for r in chosen if r.image_id in feats]
    if not chosen:
        raise ConfigError(f"no training references with features for train_source = {cfg.train_source}")
    X = np.array([feats[r.image_id] for r in chosen])
    y = np.array([int(r.label) for r in chosen])
    return X, y, [r.image_id for r in chosen], info


def evaluation_set(wd: Path):
    feats = read_features(wd / "features.csv")
    test = [r for r in read_references(wd / "expert_test.csv") if r.image_id in feats]
    if not test:
        raise ConfigError("the expert test split is empty; configure [paths] expert_labels")
    return np.array([feats[r.image_id] for r in test]), np.array([int(r.label) for r in test])


def _train(cfg: PipelineConfig, wd: Path):
    X, y, ids, info = training_set(cfg, wd)
    model = train(X, y, cfg.forest, threads=cfg.threads)
    model.save(wd / "model.bin")
    (wd / "model.txt").write_text(model.summary(feature_names(cfg.harmonic)))
    with open(wd / "train_ids.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "label"])
        for i, lab in zip(ids, y):
            w.writerow([i, CLASS_LABELS[lab]])
    return [], ["model.bin", "model.txt", "train_ids.csv"], {"n_train": len(y), **info}


def _write_confusion(path, cm: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["truth"] + [f"pred_{c}" for c in CLASS_LABELS])
        for c, row in zip(CLASS_LABELS, cm):
            w.writerow([c] + row.tolist())


def _evaluate(cfg: PipelineConfig, wd: Path):
    model = RandomForestModel.load(wd / "model.bin")
    X, y = evaluation_set(wd)
    m = evaluate(model, X, y, cfg.threads)
    write_report(wd / "report.csv", m, {"n_test": len(y)})
    _write_confusion(wd / "confusion.csv", m.confusion)
    return [], ["report.csv", "confusion.csv"], {
        "overall_acc": m.overall_accuracy, "macro_f1": m.macro_f1, "weighted_f1": m.weighted_f1,
    }


def rasterize_map(
    model: RandomForestModel,
    feature_raster: np.ndarray,
    grid: LandCoverGrid,
    legend: ClassLegend = ClassLegend(),
    threads: int = 1,
    nodata: int = MAP_NODATA,
) -> np.ndarray:
    """Predicted class code per cell; nodata off cropland and where features are missing."""
    fr = np.asarray(feature_raster, dtype=np.float64)
    if fr.ndim != 3 or fr.shape[:2] != grid.shape:
        raise AlignmentError(f"feature raster shape {fr.shape} does not match grid {grid.shape}")
    if fr.shape[2] != model.n_features:
        raise AlignmentError(f"feature raster has {fr.shape[2]} features, model expects {model.n_features}")
    out = np.full(grid.shape, nodata, dtype=np.uint8)
    crop = (grid.cells == legend.cropland) & np.isfinite(fr).all(axis=2)
    if crop.any():
        out[crop] = model.predict_classes(fr[crop], threads)
    return out


def map_grid(classes: np.ndarray, like: LandCoverGrid, nodata: int = MAP_NODATA) -> LandCoverGrid:
    return LandCoverGrid(like.ncols, like.nrows, like.xll, like.yll, like.cellsize, nodata, classes)


def map_metrics(classes: np.ndarray, truth: LandCoverGrid, nodata: int = MAP_NODATA):
    """Metrics over cells where both the map and the truth have a class; plus coverage."""
    t = np.asarray(truth.cells)
    if t.shape != classes.shape:
        raise AlignmentError(f"truth grid {t.shape} does not match map {classes.shape}")
    labelled = t != truth.nodata
    both = labelled & (classes != nodata)
    m = evaluate_predictions(t[both], classes[both])
    return m, float(both.sum() / max(1, labelled.sum()))


def _save_preview(path, classes: np.ndarray, nodata: int) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import ListedColormap

    colors = ["#2c7bb6", "#d7191c", "#fdae61", "#1a9641", "#984ea3"]
    data = np.ma.masked_equal(classes.astype(int), nodata)
    fig, ax = plt.subplots(figsize=(6, 6), dpi=100)
    ax.imshow(data, cmap=ListedColormap(colors), vmin=-0.5, vmax=N_CLASSES - 0.5, interpolation="nearest")
    ax.set_axis_off()
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in colors]
    ax.legend(handles, CLASS_LABELS, loc="lower right", fontsize=7)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def _map(cfg: PipelineConfig, wd: Path):
    model = RandomForestModel.load(wd / "model.bin")
    grid = load_grid(_require(cfg, "map", "landcover"), cfg.legend)
    fr = np.load(wd / "cell_features.npy")
    classes = rasterize_map(model, fr, grid, cfg.legend, cfg.threads)
    write_grid(wd / "map.asc", map_grid(classes, grid))
    outputs = ["map.asc"]
    summary = {"mapped_cells": int((classes != MAP_NODATA).sum())}
    if cfg.map_preview:
        _save_preview(wd / "map.png", classes, MAP_NODATA)
        outputs.append("map.png")
    if cfg.path("truth") is not None:
        truth = load_grid(_require(cfg, "map", "truth"), legend=None)
        m, coverage = map_metrics(classes, truth)
        write_report(wd / "map_report.csv", m, {"coverage": coverage})
        outputs.append("map_report.csv")
        summary.update({"map_macro_f1": m.macro_f1, "map_overall_acc": m.overall_accuracy, "coverage": coverage})
    return [], outputs, summary


# -- training-size curve -----------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    size: int
    macro_f1: float
    weighted_f1: float
    overall_acc: float


def f1_vs_trainsize(X, y, X_test, y_test, sizes: Sequence[int], seed: int = 0,
                    params: ForestParams = ForestParams(), threads: int = 1) -> list[CurvePoint]:
    """Train on nested seeded subsamples and score each on the same test set.

    One permutation of the training rows is drawn from ``seed``; size ``s``
    uses its first ``s`` entries, kept in their original row order, so the
    full size reproduces a plain training run exactly.
    """
    X = np.asarray(X)
    y = np.asarray(y)
    n = len(y)
    if max(sizes) > n:
        raise ValueError(f"curve size {max(sizes)} exceeds the {n} available training references")
    if min(sizes) < 1:
        raise ValueError("curve sizes must be positive")
    perm = np.random.default_rng(seed).permutation(n)
    out = []
    for s in sizes:
        idx = np.sort(perm[:s])
        model = train(X[idx], y[idx], params, threads=threads)
        m = evaluate(model, X_test, y_test, threads)
        out.append(CurvePoint(int(s), m.macro_f1, m.weighted_f1, m.overall_accuracy))
    return out


def default_sizes(n: int, start: int = 25) -> list[int]:
    sizes = []
    s = start
    while s < n:
        sizes.append(s)
        s *= 2
    return sizes + [n]


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="mergesort")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for val in np.unique(v):
            tie = v == val
            r[tie] = r[tie].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else float("nan")


def _curve(cfg: PipelineConfig, wd: Path):
    X, y, _, _ = training_set(cfg, wd)
    X_test, y_test = evaluation_set(wd)
    sizes = list(cfg.curve_sizes) if cfg.curve_sizes else default_sizes(len(y))
    try:
        points = f1_vs_trainsize(X, y, X_test, y_test, sizes, cfg.seed, cfg.forest, cfg.threads)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    with open(wd / "curve.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["size", "macro_f1", "weighted_f1", "overall_acc"])
        for p in points:
            w.writerow([p.size, f"{p.macro_f1:.6f}", f"{p.weighted_f1:.6f}", f"{p.overall_acc:.6f}"])
    rho = spearman([p.size for p in points], [p.macro_f1 for p in points])
    return [], ["curve.csv"], {"spearman": rho, "points": [asdict(p) for p in points]}


def read_curve(path) -> list[CurvePoint]:
    with open(path, newline="") as f:
        return [CurvePoint(int(r["size"]), float(r["macro_f1"]), float(r["weighted_f1"]), float(r["overall_acc"]))
                for r in csv.DictReader(f)]


_REFS = ("refs.csv", *EXPERT_SPLITS)

STAGES: dict[str, Stage] = {
    "densify": Stage(_densify, ("roads",), ("roads",), (), ()),
    "filter": Stage(_filter, ("landcover",), ("landcover",), (), ("candidates.csv",)),
    "plan": Stage(_plan, ("imagery",), (), (), ("filtered.csv",)),
    "fetch": Stage(_fetch, ("imagery", "roads"), (), ("truth",), ("plan.csv",)),
    "label": Stage(_label, ("labeling", "imagery"), (), ("window_predictions", "expert_labels"), ("fetched.csv",)),
    "features": Stage(_features, ("features", "landcover"), ("timeseries",), ("landcover",), _REFS),
    "train": Stage(_train, ("forest", "labeling"), (), (), ("features.csv", *_REFS)),
    "evaluate": Stage(_evaluate, (), (), (), ("model.bin", "features.csv", "expert_test.csv")),
    "map": Stage(_map, ("map", "landcover"), ("landcover",), ("truth",), ("model.bin", "cell_features.npy")),
    "curve": Stage(_curve, ("curve", "forest", "labeling"), (), (), ("features.csv", *_REFS)),
}
STAGE_ORDER = tuple(STAGES)
