"""Harmonic-regression features from cloud-masked satellite time series.

Each of five signals (Red Edge 4, SWIR 1, SWIR 2, NIR and GCVI) is fitted
with an intercept plus three cosine/sine pairs over the season, giving
7 coefficients per signal and 35 features per point.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

SIGNALS = ("RedEdge4", "SWIR1", "SWIR2", "NIR", "GCVI")
RAW_BANDS = ("RedEdge4", "SWIR1", "SWIR2", "NIR", "Green")
N_FEATURES = 35


class InsufficientObservationsError(ValueError):
    pass


class DegenerateSamplingError(ValueError):
    pass


class BandError(ValueError):
    """A per-band failure, tagged with the band it came from."""

    def __init__(self, band: str, cause: Exception):
        super().__init__(f"{band}: {cause}")
        self.band = band
        self.cause = cause


@dataclass(frozen=True)
class HarmonicConfig:
    order: int = 3
    period_days: float = 184.0
    min_obs: int = 10
    cloud_threshold: float = 40.0

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("order must be non-negative")
        if not self.period_days > 0:
            raise ValueError("period must be positive")
        if self.min_obs < 2 * self.order + 1:
            raise ValueError("min_obs must be at least 2*order + 1")

    @property
    def n_coef(self) -> int:
        return 2 * self.order + 1


@dataclass(frozen=True, eq=False)
class BandSeries:
    band: str
    t: np.ndarray
    value: np.ndarray
    cloud_prob: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        v = np.asarray(self.value, dtype=np.float64)
        c = np.asarray(self.cloud_prob, dtype=np.float64)
        if not (t.shape == v.shape == c.shape) or t.ndim != 1:
            raise ValueError("t, value and cloud_prob must be 1-D arrays of equal length")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError(f"{self.band}: sample times must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{self.band}: non-finite values")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "value", v)
        object.__setattr__(self, "cloud_prob", c)

    def __len__(self):
        return self.t.size


def gcvi(nir, green):
    """Green chlorophyll vegetation index, NIR / Green - 1."""
    green_arr = np.asarray(green, dtype=np.float64)
    if np.any(green_arr <= 0):
        raise ValueError("green reflectance must be positive")
    out = np.asarray(nir, dtype=np.float64) / green_arr - 1.0
    return float(out) if out.ndim == 0 else out


def mask_clouds(series: BandSeries, cloud_threshold: float = 40.0) -> BandSeries:
    """Drop samples whose cloud probability is strictly above the threshold."""
    keep = series.cloud_prob <= cloud_threshold
    return replace(series, t=series.t[keep], value=series.value[keep], cloud_prob=series.cloud_prob[keep])


def design_matrix(t, period: float, order: int = 3) -> np.ndarray:
    """Columns: 1, cos(w t), sin(w t), ..., cos(k w t), sin(k w t)."""
    t = np.asarray(t, dtype=np.float64)
    cols = [np.ones_like(t)]
    for k in range(1, order + 1):
        arg = 2.0 * math.pi * k * t / period
        cols.append(np.cos(arg))
        cols.append(np.sin(arg))
    return np.stack(cols, axis=-1)


def harmonic_fit(series: BandSeries, cfg: HarmonicConfig = HarmonicConfig()) -> np.ndarray:
    """Least-squares harmonic coefficients (a0, a1, b1, ..., a_k, b_k)."""
    n = len(series)
    if n < cfg.min_obs:
        raise InsufficientObservationsError(f"{series.band}: {n} observations, need {cfg.min_obs}")
    A = design_matrix(series.t, cfg.period_days, cfg.order)
    coef, _, rank, _ = np.linalg.lstsq(A, series.value, rcond=None)
    if rank < cfg.n_coef:
        raise DegenerateSamplingError(f"{series.band}: design matrix has rank {rank} < {cfg.n_coef}")
    return coef


def harmonic_fit_batch(
    t: np.ndarray, values: np.ndarray, mask: np.ndarray | None = None, cfg: HarmonicConfig = HarmonicConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Fit many series sharing sample times but with their own masks.

    ``values`` and ``mask`` are (n_series, n_t). Solves each masked normal
    system; returns (coefficients (n_series, n_coef), ok flags). Series with
    too few observations or a singular system get NaN coefficients.
    """
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
    w = mask.astype(np.float64)
    A = design_matrix(t, cfg.period_days, cfg.order)
    G = np.einsum("st,ti,tj->sij", w, A, A)
    rhs = np.einsum("st,st,ti->si", w, np.where(mask, values, 0.0), A)
    ok = mask.sum(axis=1) >= cfg.min_obs
    # reject near-singular systems the same way lstsq would see a rank drop
    eig = np.linalg.eigvalsh(G)
    ok &= eig[:, 0] > eig[:, -1] * 1e-12
    coef = np.full((values.shape[0], cfg.n_coef), np.nan)
    if ok.any():
        coef[ok] = np.linalg.solve(G[ok], rhs[ok][..., None])[..., 0]
    return coef, ok


def gcvi_series(nir: BandSeries, green: BandSeries) -> BandSeries:
    """GCVI at the times both bands were observed; cloud probability is the larger of the two."""
    common, i_n, i_g = np.intersect1d(nir.t, green.t, return_indices=True)
    return BandSeries(
        "GCVI",
        common,
        gcvi(nir.value[i_n], green.value[i_g]),
        np.maximum(nir.cloud_prob[i_n], green.cloud_prob[i_g]),
    )


def signals_from_bands(bands: Mapping[str, BandSeries], cfg: HarmonicConfig = HarmonicConfig()) -> list[BandSeries]:
    """Masked series for the five fitted signals, GCVI derived from NIR and Green."""
    for b in RAW_BANDS:
        if b not in bands:
            raise BandError(b, ValueError("band missing"))
    out = [mask_clouds(bands[b], cfg.cloud_threshold) for b in SIGNALS[:4]]
    nir = mask_clouds(bands["NIR"], cfg.cloud_threshold)
    green = mask_clouds(bands["Green"], cfg.cloud_threshold)
    out.append(gcvi_series(nir, green))
    return out


def extract_features(signals: Sequence[BandSeries], cfg: HarmonicConfig = HarmonicConfig()) -> np.ndarray:
    """Concatenate per-signal coefficients in the fixed signal order."""
    if len(signals) != len(SIGNALS):
        raise ValueError(f"expected {len(SIGNALS)} signals, got {len(signals)}")
    coefs = []
    for name, s in zip(SIGNALS, signals):
        try:
            coefs.append(harmonic_fit(s, cfg))
        except ValueError as e:
            raise BandError(name, e) from e
    return np.concatenate(coefs)


def features_from_cube(t, bands: Mapping[str, np.ndarray], cloud: np.ndarray,
                       cfg: HarmonicConfig = HarmonicConfig()) -> np.ndarray:
    """Features for many series sharing sample times.

    ``bands`` maps each raw band to an (n, n_t) array and ``cloud`` is the
    (n, n_t) cloud probability shared by all bands of an acquisition.
    Returns (n, 35); rows whose fit fails for any signal are NaN.
    """
    for b in RAW_BANDS:
        if b not in bands:
            raise BandError(b, ValueError("band missing"))
    mask = np.asarray(cloud) <= cfg.cloud_threshold
    green = np.asarray(bands["Green"], dtype=np.float64)
    safe = green > 0
    signals = [np.asarray(bands[b], dtype=np.float64) for b in SIGNALS[:4]]
    signals.append(np.where(safe, np.asarray(bands["NIR"]) / np.where(safe, green, 1.0) - 1.0, 0.0))
    coefs, ok = [], np.ones(mask.shape[0], dtype=bool)
    for i, s in enumerate(signals):
        m = mask & safe if i == 4 else mask
        c, good = harmonic_fit_batch(t, s, m, cfg)
        coefs.append(c)
        ok &= good
    X = np.concatenate(coefs, axis=1)
    X[~ok] = np.nan
    return X


def feature_names(cfg: HarmonicConfig = HarmonicConfig()) -> list[str]:
    names = []
    for s in SIGNALS:
        names.append(f"{s}_a0")
        for k in range(1, cfg.order + 1):
            names += [f"{s}_a{k}", f"{s}_b{k}"]
    return names


# -- CSV I/O ---------------------------------------------------------------

TIMESERIES_HEADER = ["point_id", "band", "t_days", "value", "cloud_prob"]


def read_timeseries(path) -> dict[str, dict[str, BandSeries]]:
    """point_id -> band -> series (samples sorted by time)."""
    raw: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != TIMESERIES_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            raw[row["point_id"]][row["band"]].append(
                (float(row["t_days"]), float(row["value"]), float(row["cloud_prob"]))
            )
    out = {}
    for pid, bands in raw.items():
        out[pid] = {}
        for band, samples in bands.items():
            samples.sort()
            arr = np.array(samples, dtype=np.float64)
            out[pid][band] = BandSeries(band, arr[:, 0], arr[:, 1], arr[:, 2])
    return out


def write_timeseries(path, series: Mapping[str, Mapping[str, BandSeries]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TIMESERIES_HEADER)
        for pid, bands in series.items():
            for band, s in bands.items():
                for t, v, c in zip(s.t, s.value, s.cloud_prob):
                    w.writerow([pid, band, repr(float(t)), repr(float(v)), repr(float(c))])


FEATURE_HEADER = ["point_id"] + [f"f{i}" for i in range(N_FEATURES)]


def write_features(path, feats: Mapping[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(FEATURE_HEADER)
        for pid, vec in feats.items():
            w.writerow([pid] + [repr(float(x)) for x in vec])


def read_features(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != FEATURE_HEADER:
            raise ValueError(f"{path}: unexpected feature header")
        for row in reader:
            out[row[0]] = np.array([float(x) for x in row[1:]], dtype=np.float64)
    return out


def features_for_points(
    series: Mapping[str, Mapping[str, BandSeries]], cfg: HarmonicConfig = HarmonicConfig()
) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Feature vectors for every point that can be fitted, and the failure reason for the rest."""
    feats, failed = {}, {}
    for pid in series:
        try:
            feats[pid] = extract_features(signals_from_bands(series[pid], cfg), cfg)
        except (BandError, ValueError) as e:
            failed[pid] = str(e)
    return feats, failed
