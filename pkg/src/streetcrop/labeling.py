"""Image-level crop labels from per-window softmax outputs, and ground-reference datasets."""

from __future__ import annotations

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geodesy import EARTH, EarthModel, GeoPoint
from .roadnet import min_separation_thin


class CropClass(enum.IntEnum):
    RICE = 0
    CASSAVA = 1
    MAIZE = 2
    SUGARCANE = 3
    OTHER = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, s: str) -> "CropClass":
        try:
            return cls[s.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown crop label {s!r}") from None


N_CLASSES = len(CropClass)
CLASS_LABELS = [c.label for c in CropClass]


class Rejected:
    """Sentinel returned by :func:`mhp_vote` when an image yields no label."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "REJECTED"

    def __bool__(self):
        return False


REJECTED = Rejected()


class LegendError(ValueError):
    pass


class JoinError(ValueError):
    def __init__(self, missing: Sequence[str]):
        shown = ", ".join(list(missing)[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        super().__init__(f"{len(missing)} image ids have no field point: {shown}{more}")
        self.missing = list(missing)


class ImageTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class WindowRect:
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class WindowPrediction:
    rect: WindowRect | None
    probs: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(v) for v in self.probs)
        if len(p) != N_CLASSES:
            raise ValueError(f"expected {N_CLASSES} probabilities, got {len(p)}")
        if min(p) < 0 or abs(sum(p) - 1.0) > 1e-6:
            raise ValueError(f"probabilities must be non-negative and sum to 1: {p}")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class GroundReference:
    image_id: str
    point: GeoPoint
    label: CropClass
    source: str = "auto"
    votes: tuple[int, ...] = ()


def sliding_windows(img_w: int, img_h: int, win: int = 300, stride: int = 50) -> list[WindowRect]:
    if img_w < win or img_h < win:
        raise ImageTooSmallError(f"image {img_w}x{img_h} is smaller than the {win}px window")
    if stride <= 0:
        raise ValueError("stride must be positive")
    xs = range(0, img_w - win + 1, stride)
    ys = range(0, img_h - win + 1, stride)
    return [WindowRect(x, y, win, win) for y in ys for x in xs]


def window_votes(preds: Sequence[WindowPrediction] | np.ndarray, tau: float = 0.9) -> np.ndarray:
    """Per-class vote counts.

    A window votes for its highest-probability class (lowest index on a
    tie) when that probability is strictly greater than ``tau``.
    """
    if isinstance(preds, np.ndarray):
        probs = preds
    else:
        probs = np.array([p.probs for p in preds], dtype=np.float64)
    if probs.size == 0:
        return np.zeros(N_CLASSES, dtype=np.int64)
    top = probs.argmax(axis=1)
    confident = probs[np.arange(len(probs)), top] > tau
    return np.bincount(top[confident], minlength=probs.shape[1])


def mhp_vote(preds: Sequence[WindowPrediction] | np.ndarray, tau: float = 0.9):
    """Mode of high probabilities: the class with the most confident window votes.

    Returns :data:`REJECTED` when no window votes or when the top vote count
    is shared by several classes.
    """
    if len(preds) == 0:
        raise ValueError("mhp_vote needs at least one window prediction")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    votes = window_votes(preds, tau)
    top = votes.max()
    if top == 0 or (votes == top).sum() > 1:
        return REJECTED
    return CropClass(int(votes.argmax()))


# -- window prediction files -----------------------------------------------

WINDOW_HEADER = ["image_id", "window_index", "x", "y"] + [f"p_{c}" for c in CLASS_LABELS]


def read_window_predictions(path) -> dict[str, np.ndarray]:
    """image_id -> (n_windows, 5) probability array, windows ordered by index."""
    rows: dict[str, list[tuple[int, list[float]]]] = defaultdict(list)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != WINDOW_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                probs = [float(row[f"p_{c}"]) for c in CLASS_LABELS]
                rows[row["image_id"]].append((int(row["window_index"]), probs))
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
    out = {}
    for image_id, items in rows.items():
        items.sort(key=lambda t: t[0])
        out[image_id] = np.array([p for _, p in items], dtype=np.float64)
    return out


def write_window_predictions(path, preds: Mapping[str, Sequence[WindowPrediction]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(WINDOW_HEADER)
        for image_id, windows in preds.items():
            for i, wp in enumerate(windows):
                x, y = (wp.rect.x, wp.rect.y) if wp.rect else (0, 0)
                w.writerow([image_id, i, x, y] + [repr(p) for p in wp.probs])


@dataclass
class LabelStats:
    images: int = 0
    labelled: int = 0
    rejected: int = 0
    rejected_ids: list = field(default_factory=list)


def label_images(
    window_preds: Mapping[str, np.ndarray] | str,
    field_points: Mapping[str, GeoPoint],
    tau: float = 0.9,
    stats: LabelStats | None = None,
) -> list[GroundReference]:
    """Vote each image and pair the label with the image's field point.

    ``window_preds`` is a mapping from image id to window probabilities or
    a path to a window-prediction CSV. Output is ordered by image id.
    """
    if isinstance(window_preds, (str, bytes)) or hasattr(window_preds, "__fspath__"):
        window_preds = read_window_predictions(window_preds)
    missing = sorted(k for k in window_preds if k not in field_points)
    if missing:
        raise JoinError(missing)
    stats = stats if stats is not None else LabelStats()
    refs = []
    for image_id in sorted(window_preds):
        probs = np.asarray(window_preds[image_id], dtype=np.float64)
        stats.images += 1
        cls = mhp_vote(probs, tau)
        if cls is REJECTED:
            stats.rejected += 1
            stats.rejected_ids.append(image_id)
            continue
        votes = tuple(int(v) for v in window_votes(probs, tau))
        refs.append(GroundReference(image_id, field_points[image_id], cls, "auto", votes))
        stats.labelled += 1
    return refs


# -- ground-reference CSVs -------------------------------------------------

EXPERT_HEADER = ["image_id", "lat", "lon", "label"]
REFERENCE_HEADER = ["image_id", "lat", "lon", "label", "source"] + [f"votes_{c}" for c in CLASS_LABELS]


def ingest_expert_labels(path, source: str = "expert") -> list[GroundReference]:
    """Read an ``image_id,lat,lon,label`` CSV. Labels from other annotators
    (e.g. a multimodal model) come in the same way with ``source="external"``."""
    refs = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            return refs
        if [h.strip() for h in reader.fieldnames] != EXPERT_HEADER:
            raise ValueError(f"{path}: expected header {','.join(EXPERT_HEADER)}")
        for rowno, row in enumerate(reader, start=1):
            try:
                label = CropClass.parse(row["label"])
            except ValueError:
                raise LegendError(f"row {rowno}: unknown crop label {row['label']!r}") from None
            refs.append(
                GroundReference(row["image_id"], GeoPoint(float(row["lat"]), float(row["lon"])), label, source)
            )
    return refs


def write_expert_labels(path, refs: Iterable[GroundReference]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EXPERT_HEADER)
        for r in refs:
            w.writerow([r.image_id, repr(r.point.lat), repr(r.point.lon), r.label.label])


def write_references(path, refs: Iterable[GroundReference]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REFERENCE_HEADER)
        for r in refs:
            votes = list(r.votes) if r.votes else [""] * N_CLASSES
            w.writerow([r.image_id, repr(r.point.lat), repr(r.point.lon), r.label.label, r.source] + votes)


def read_references(path) -> list[GroundReference]:
    refs = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            votes = tuple(int(row[f"votes_{c}"]) for c in CLASS_LABELS) if row["votes_rice"] else ()
            refs.append(
                GroundReference(
                    row["image_id"],
                    GeoPoint(float(row["lat"]), float(row["lon"])),
                    CropClass.parse(row["label"]),
                    row["source"],
                    votes,
                )
            )
    return refs


# -- splitting -------------------------------------------------------------


def _split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [math.floor(r) for r in raw]
    # largest remainder, earlier split first on ties
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(
    refs: Sequence[GroundReference],
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    min_sep: float = 100.0,
    earth: EarthModel = EARTH,
) -> tuple[list[GroundReference], ...]:
    """Thin to ``min_sep`` then randomly split into train/val/test.

    Thinning first means no two references in different splits can be
    within ``min_sep`` of each other.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    thinned = min_separation_thin(refs, min_sep, earth=earth)
    perm = np.random.default_rng(seed).permutation(len(thinned))
    out = []
    start = 0
    for size in _split_sizes(len(thinned), fractions):
        out.append([thinned[i] for i in perm[start:start + size]])
        start += size
    return tuple(out)
