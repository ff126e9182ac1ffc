"""Pipeline configuration: one INI file with a section per stage.

Every tunable constant has a named key with its default shown by
``streetcrop config --defaults``. Relative paths in ``[paths]`` resolve
against the config file's directory; ``run.workdir`` likewise.
"""

from __future__ import annotations

import configparser
import datetime as dt
import hashlib
import json
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from pathlib import Path

from .features import HarmonicConfig
from .forest import ForestParams
from .landcover import ClassLegend
from .svclient import Budget, WET_SEASON_2022

INPUTS = ("roads", "landcover", "expert_labels", "window_predictions", "timeseries", "truth")
TRANSPORTS = ("mock", "synthetic", "streetview")
TRAIN_SOURCES = ("auto", "expert", "both")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    region: str = "unnamed"
    seed: int = 0
    workdir: Path = Path("work")
    threads: int = 1
    paths: dict = field(default_factory=dict)

    highway_allowlist: tuple[str, ...] | None = None
    step_m: float = 10.0
    field_distance_m: float = 30.0

    legend: ClassLegend = ClassLegend()
    filter_radius_m: float = 10.0

    season: tuple[dt.date, dt.date] = WET_SEASON_2022
    image_size: tuple[int, int] = (640, 640)
    max_requests: int | None = None
    transport: str = "mock"
    rate: float = 10.0
    workers: int = 4
    backoff_s: float = 0.5
    budget: Budget = Budget()
    cache_dir: str = "cache"

    window: int = 300
    stride: int = 50
    tau: float = 0.9
    min_sep_m: float = 100.0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)

    harmonic: HarmonicConfig = HarmonicConfig()
    forest: ForestParams = ForestParams()
    train_source: str = "auto"

    curve_sizes: tuple[int, ...] | None = None
    map_preview: bool = False

    def path(self, name: str) -> Path | None:
        p = self.paths.get(name)
        return Path(p) if p else None

    @property
    def cache_path(self) -> Path:
        return Path(self.workdir) / self.cache_dir

    # -- serialization -----------------------------------------------------

    def to_sections(self) -> dict[str, dict[str, str]]:
        def opt(v):
            return "" if v is None else str(v)

        f = self.forest
        return {
            "run": {"region": self.region, "seed": str(self.seed), "workdir": str(self.workdir),
                    "threads": str(self.threads)},
            "paths": {k: opt(self.paths.get(k)) for k in INPUTS},
            "roads": {
                "highway_allowlist": ",".join(self.highway_allowlist) if self.highway_allowlist else "",
                "step_m": repr(self.step_m),
                "field_distance_m": repr(self.field_distance_m),
            },
            "landcover": {
                "cropland_code": str(self.legend.cropland),
                "tree_cover_code": str(self.legend.tree_cover),
                "radius_m": repr(self.filter_radius_m),
            },
            "imagery": {
                "season_start": self.season[0].isoformat(),
                "season_end": self.season[1].isoformat(),
                "image_width": str(self.image_size[0]),
                "image_height": str(self.image_size[1]),
                "max_requests": opt(self.max_requests),
                "transport": self.transport,
                "rate_per_s": repr(self.rate),
                "workers": str(self.workers),
                "retry_backoff_s": repr(self.backoff_s),
                "usd_per_1000": str(self.budget.unit_cost_usd_per_1000),
                "budget_usd": opt(self.budget.max_usd),
                "cache_dir": self.cache_dir,
            },
            "labeling": {
                "window_px": str(self.window),
                "stride_px": str(self.stride),
                "tau": repr(self.tau),
                "min_separation_m": repr(self.min_sep_m),
                "split": ",".join(repr(x) for x in self.split),
            },
            "features": {
                "harmonic_order": str(self.harmonic.order),
                "period_days": repr(self.harmonic.period_days),
                "min_observations": str(self.harmonic.min_obs),
                "cloud_threshold": repr(self.harmonic.cloud_threshold),
            },
            "forest": {
                "n_trees": str(f.n_trees),
                "max_features": opt(f.max_features),
                "min_leaf": str(f.min_leaf),
                "max_depth": opt(f.max_depth),
                "train_source": self.train_source,
            },
            "curve": {"sizes": ",".join(map(str, self.curve_sizes)) if self.curve_sizes else ""},
            "map": {"preview": "yes" if self.map_preview else "no"},
        }

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(self.to_sections())
        lines = []
        for name in cp.sections():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in cp[name].items()]
            lines.append("")
        return "\n".join(lines)

    def fingerprint(self, *sections: str) -> str:
        s = self.to_sections()
        blob = json.dumps({k: s[k] for k in sections}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _get(sec, key, conv, default):
    raw = sec.get(key, "").strip() if sec is not None else ""
    if raw == "":
        return default
    try:
        return conv(raw)
    except (ValueError, InvalidOperation) as e:
        raise ConfigError(f"[{sec.name}] {key} = {raw!r}: {e}") from None


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError("expected yes/no")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(","))


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(","))


def from_sections(sections, base_dir: Path | None = None) -> PipelineConfig:
    known = set(PipelineConfig().to_sections())
    for name in sections:
        if name not in known and name != "DEFAULT":
            raise ConfigError(f"unknown section [{name}]")
    d = PipelineConfig()
    default_keys = d.to_sections()
    for name, sec in sections.items():
        if name == "DEFAULT":
            continue
        for k in sec:
            if k not in default_keys[name]:
                raise ConfigError(f"unknown key {k!r} in [{name}]")

    def sec(name):
        return sections[name] if name in sections else None

    base = Path(base_dir) if base_dir else Path(".")

    def resolve(p: str) -> Path:
        q = Path(p).expanduser()
        return q if q.is_absolute() else base / q

    run, paths, roads, lc = sec("run"), sec("paths"), sec("roads"), sec("landcover")
    img, lab, feat, fo = sec("imagery"), sec("labeling"), sec("features"), sec("forest")
    try:
        allow = _get(roads, "highway_allowlist", lambda s: tuple(x.strip() for x in s.split(",") if x.strip()), None)
        cfg = PipelineConfig(
            region=_get(run, "region", str, d.region),
            seed=_get(run, "seed", int, d.seed),
            workdir=resolve(_get(run, "workdir", str, str(d.workdir))),
            threads=_get(run, "threads", int, d.threads),
            paths={k: resolve(v) for k in INPUTS if (v := _get(paths, k, str, None))},
            highway_allowlist=allow or None,
            step_m=_get(roads, "step_m", float, d.step_m),
            field_distance_m=_get(roads, "field_distance_m", float, d.field_distance_m),
            legend=ClassLegend(
                cropland=_get(lc, "cropland_code", int, d.legend.cropland),
                tree_cover=_get(lc, "tree_cover_code", int, d.legend.tree_cover),
            ),
            filter_radius_m=_get(lc, "radius_m", float, d.filter_radius_m),
            season=(
                _get(img, "season_start", dt.date.fromisoformat, d.season[0]),
                _get(img, "season_end", dt.date.fromisoformat, d.season[1]),
            ),
            image_size=(_get(img, "image_width", int, 640), _get(img, "image_height", int, 640)),
            max_requests=_get(img, "max_requests", int, None),
            transport=_get(img, "transport", str, d.transport),
            rate=_get(img, "rate_per_s", float, d.rate),
            workers=_get(img, "workers", int, d.workers),
            backoff_s=_get(img, "retry_backoff_s", float, d.backoff_s),
            budget=Budget(
                _get(img, "usd_per_1000", Decimal, d.budget.unit_cost_usd_per_1000),
                _get(img, "budget_usd", Decimal, None),
            ),
            cache_dir=_get(img, "cache_dir", str, d.cache_dir),
            window=_get(lab, "window_px", int, d.window),
            stride=_get(lab, "stride_px", int, d.stride),
            tau=_get(lab, "tau", float, d.tau),
            min_sep_m=_get(lab, "min_separation_m", float, d.min_sep_m),
            split=_get(lab, "split", _floats, d.split),
            harmonic=HarmonicConfig(
                order=_get(feat, "harmonic_order", int, d.harmonic.order),
                period_days=_get(feat, "period_days", float, d.harmonic.period_days),
                min_obs=_get(feat, "min_observations", int, d.harmonic.min_obs),
                cloud_threshold=_get(feat, "cloud_threshold", float, d.harmonic.cloud_threshold),
            ),
            forest=ForestParams(
                n_trees=_get(fo, "n_trees", int, d.forest.n_trees),
                max_features=_get(fo, "max_features", int, None),
                min_leaf=_get(fo, "min_leaf", int, d.forest.min_leaf),
                max_depth=_get(fo, "max_depth", int, None),
                seed=_get(run, "seed", int, d.seed),
            ),
            train_source=_get(fo, "train_source", str, d.train_source),
            curve_sizes=_get(sec("curve"), "sizes", _ints, None),
            map_preview=_get(sec("map"), "preview", _bool, False),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    problems = []
    if cfg.step_m <= 0:
        problems.append("step_m must be positive")
    if cfg.field_distance_m <= 0:
        problems.append("field_distance_m must be positive")
    if cfg.filter_radius_m < 0:
        problems.append("radius_m must be non-negative")
    if cfg.season[0] > cfg.season[1]:
        problems.append("season_start is after season_end")
    if cfg.transport not in TRANSPORTS:
        problems.append(f"transport must be one of {', '.join(TRANSPORTS)}")
    if cfg.train_source not in TRAIN_SOURCES:
        problems.append(f"train_source must be one of {', '.join(TRAIN_SOURCES)}")
    if not 0 <= cfg.tau <= 1:
        problems.append("tau must lie in [0, 1]")
    if len(cfg.split) != 3 or abs(sum(cfg.split) - 1) > 1e-9 or min(cfg.split) < 0:
        problems.append("split must be three non-negative fractions summing to 1")
    if cfg.window <= 0 or cfg.stride <= 0:
        problems.append("window and stride must be positive")
    if cfg.backoff_s < 0:
        problems.append("retry_backoff_s must be non-negative")
    if cfg.rate <= 0 or cfg.workers < 1 or cfg.threads < 1:
        problems.append("rate, workers and threads must be positive")
    if cfg.max_requests is not None and cfg.max_requests < 0:
        problems.append("max_requests must be non-negative")
    if cfg.curve_sizes is not None and min(cfg.curve_sizes) < 1:
        problems.append("curve sizes must be positive")
    if problems:
        raise ConfigError("; ".join(problems))


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read an INI file (or use defaults) and apply ``{"section.key": value}`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        base = path.parent
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key] = str(value)
    cfg = from_sections({s: cp[s] for s in cp.sections()}, base)
    # workdir given on the command line is relative to the current directory
    if overrides and "run.workdir" in overrides:
        cfg = replace(cfg, workdir=Path(overrides["run.workdir"]).resolve())
    return cfg
