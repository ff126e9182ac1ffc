"""Street-view request planning, budgeting and cached fetching.

The network side is behind a small transport interface: anything with a
``get(request)`` method returning :class:`Image`, :data:`NOT_AVAILABLE`
or raising :class:`TransientError`. :class:`MockTransport` serves tests
and the synthetic pipeline; :class:`StreetViewTransport` talks to the
real Street View Static API.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from .geodesy import GeoPoint
from .roadnet import CandidatePoint

log = logging.getLogger(__name__)

WET_SEASON_2022 = (dt.date(2022, 5, 1), dt.date(2022, 10, 31))


class BudgetExceededError(RuntimeError):
    def __init__(self, message: str, overage: Decimal = Decimal("0"), report=None):
        super().__init__(message)
        self.overage = overage
        self.report = report


class TransientError(RuntimeError):
    """Retryable transport failure (timeouts, 5xx, rate-limit responses)."""


@dataclass(frozen=True)
class ImageRequest:
    point: GeoPoint
    heading: float
    date_window: tuple[dt.date, dt.date] = WET_SEASON_2022
    size: tuple[int, int] = (640, 640)

    def __post_init__(self):
        if self.date_window[0] > self.date_window[1]:
            raise ValueError("date window start is after its end")

    @cached_property
    def request_id(self) -> str:
        key = "|".join(
            [
                f"{self.point.lat:.7f}",
                f"{self.point.lon:.7f}",
                f"{self.heading:.4f}",
                f"{self.size[0]}x{self.size[1]}",
                self.date_window[0].isoformat(),
                self.date_window[1].isoformat(),
            ]
        )
        return hashlib.sha256(key.encode()).hexdigest()[:20]


@dataclass(frozen=True)
class Budget:
    unit_cost_usd_per_1000: Decimal = Decimal("7.00")
    max_usd: Decimal | None = None

    def __post_init__(self):
        object.__setattr__(self, "unit_cost_usd_per_1000", Decimal(str(self.unit_cost_usd_per_1000)))
        if self.max_usd is not None:
            object.__setattr__(self, "max_usd", Decimal(str(self.max_usd)))
        if self.unit_cost_usd_per_1000 < 0 or (self.max_usd is not None and self.max_usd < 0):
            raise ValueError("budget amounts must be non-negative")


def _cents(x: Decimal) -> Decimal:
    return x.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def estimate_cost(n_requests: int, budget: Budget = Budget()) -> Decimal:
    """Dollar cost of ``n_requests`` images, rounded half-up to cents."""
    if n_requests < 0:
        raise ValueError("request count must be non-negative")
    cost = _cents(Decimal(n_requests) * budget.unit_cost_usd_per_1000 / 1000)
    if budget.max_usd is not None and cost > budget.max_usd:
        over = cost - budget.max_usd
        raise BudgetExceededError(f"estimated ${cost} exceeds cap ${budget.max_usd} by ${over}", over)
    return cost


def plan_requests(
    candidates: Iterable[CandidatePoint],
    window: tuple[dt.date, dt.date] = WET_SEASON_2022,
    size: tuple[int, int] = (640, 640),
) -> list[ImageRequest]:
    """One request per surviving (field point, heading) view, in input order.

    The camera stands at the street point and faces the field.
    """
    return [
        ImageRequest(c.street, h, window, size)
        for c in candidates
        for h, _ in c.views()
    ]


def subsample(plan: list, n: int | None, seed: int) -> list:
    """Seeded subsample of ``n`` requests, keeping plan order."""
    if n is None or n >= len(plan):
        return list(plan)
    idx = np.sort(np.random.default_rng(seed).choice(len(plan), size=n, replace=False))
    return [plan[i] for i in idx]


# -- transports ------------------------------------------------------------


@dataclass(frozen=True)
class Image:
    data: bytes
    capture_date: dt.date | None


NOT_AVAILABLE = None


class Transport(Protocol):
    def get(self, request: ImageRequest) -> Image | None: ...


class MockTransport:
    """Scripted in-memory transport.

    ``responses`` maps request_id to a list of outcomes consumed one per
    call; the last outcome repeats. An outcome is an :class:`Image`,
    ``None`` (not available) or an exception instance to raise. Requests
    not in ``responses`` go to ``default`` (a callable) or get a small
    fake image dated inside the request window.
    """

    def __init__(self, responses=None, default: Callable[[ImageRequest], object] | None = None):
        self.responses = {k: list(v) for k, v in (responses or {}).items()}
        self.default = default
        self.calls: list[tuple[float, str]] = []
        self._lock = threading.Lock()

    def get(self, request: ImageRequest):
        rid = request.request_id
        with self._lock:
            self.calls.append((time.monotonic(), rid))
            script = self.responses.get(rid)
            if script:
                outcome = script.pop(0) if len(script) > 1 else script[0]
            elif self.default is not None:
                outcome = self.default(request)
            else:
                outcome = Image(f"image:{rid}".encode(), request.date_window[0])
        if isinstance(outcome, BaseException):
            raise outcome
        return outcome


class StreetViewTransport:
    """Google Street View Static API client.

    Metadata lookups are free and give the capture month; only requests
    with imagery are fetched and billed.
    """

    metadata_url = "https://maps.googleapis.com/maps/api/streetview/metadata"
    image_url = "https://maps.googleapis.com/maps/api/streetview"

    def __init__(self, api_key: str | None = None, timeout: float = 30.0, session=None):
        import requests

        self.api_key = api_key or os.environ.get("STREETVIEW_API_KEY")
        if not self.api_key:
            raise ValueError("no API key; set STREETVIEW_API_KEY")
        self.timeout = timeout
        self.session = session or requests.Session()
        self._requests = requests

    def _params(self, request: ImageRequest) -> dict:
        return {
            "location": f"{request.point.lat:.7f},{request.point.lon:.7f}",
            "heading": f"{request.heading:.2f}",
            "size": f"{request.size[0]}x{request.size[1]}",
            "source": "outdoor",
            "key": self.api_key,
        }

    def _get(self, url, params):
        try:
            r = self.session.get(url, params=params, timeout=self.timeout)
        except self._requests.RequestException as e:
            raise TransientError(str(e)) from e
        if r.status_code == 429 or r.status_code >= 500:
            raise TransientError(f"HTTP {r.status_code}")
        r.raise_for_status()
        return r

    def get(self, request: ImageRequest):
        meta = self._get(self.metadata_url, self._params(request)).json()
        status = meta.get("status")
        if status in ("ZERO_RESULTS", "NOT_FOUND"):
            return NOT_AVAILABLE
        if status != "OK":
            raise TransientError(f"metadata status {status}")
        capture = parse_capture_date(meta.get("date"))
        img = self._get(self.image_url, self._params(request))
        return Image(img.content, capture)


def parse_capture_date(s: str | None) -> dt.date | None:
    """Street View reports capture dates as ``YYYY-MM`` or ``YYYY-MM-DD``."""
    if not s:
        return None
    parts = [int(p) for p in s.split("-")]
    return dt.date(parts[0], parts[1], parts[2] if len(parts) > 2 else 1)


# -- rate limiting ---------------------------------------------------------


class RateLimiter:
    """Global minimum-interval limiter shared by all workers."""

    def __init__(self, rate: float, clock=time.monotonic, sleep=time.sleep):
        if not rate > 0:
            raise ValueError("rate must be positive")
        self.interval = 1.0 / rate
        self.clock = clock
        self.sleep = sleep
        self._next = None
        self._lock = threading.Lock()

    def acquire(self):
        with self._lock:
            now = self.clock()
            if self._next is None or now >= self._next:
                self._next = now + self.interval
                return
            wait = self._next - now
            self._next += self.interval
        self.sleep(wait)


# -- cache -----------------------------------------------------------------

MANIFEST_HEADER = ["request_id", "lat", "lon", "heading_deg", "status", "capture_date", "file"]


class ImageCache:
    """Content-addressed image store under ``root/images`` plus a CSV manifest.

    Manifest rows are appended by a single writer under a lock; a later row
    for the same request_id supersedes an earlier one.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.images = self.root / "images"
        self.images.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.csv"
        self.entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.manifest_path.exists():
            with open(self.manifest_path, newline="") as f:
                for row in csv.DictReader(f):
                    self.entries[row["request_id"]] = row
        else:
            with open(self.manifest_path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(MANIFEST_HEADER)

    def get(self, request_id: str) -> dict | None:
        return self.entries.get(request_id)

    def is_final(self, request_id: str) -> bool:
        e = self.entries.get(request_id)
        return e is not None and e["status"] in ("fetched", "excluded", "unavailable")

    def put(self, request: ImageRequest, status: str, image: Image | None = None):
        rel = ""
        capture = ""
        if image is not None:
            digest = hashlib.sha256(image.data).hexdigest()
            rel = f"images/{digest}.jpg"
            path = self.root / rel
            if not path.exists():
                tmp = path.with_suffix(f".tmp{threading.get_ident()}")
                tmp.write_bytes(image.data)
                os.replace(tmp, path)
            capture = image.capture_date.isoformat() if image.capture_date else ""
        row = {
            "request_id": request.request_id,
            "lat": repr(request.point.lat),
            "lon": repr(request.point.lon),
            "heading_deg": repr(request.heading),
            "status": status,
            "capture_date": capture,
            "file": rel,
        }
        with self._lock:
            self.entries[row["request_id"]] = row
            with open(self.manifest_path, "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow([row[k] for k in MANIFEST_HEADER])

    def read_image(self, request_id: str) -> bytes:
        return (self.root / self.entries[request_id]["file"]).read_bytes()


# -- fetching --------------------------------------------------------------


@dataclass
class FetchReport:
    planned: int = 0
    fetched: int = 0
    cached: int = 0
    unavailable: int = 0
    failed: int = 0
    excluded: int = 0
    spend_usd: Decimal = Decimal("0.00")
    attempts: dict = field(default_factory=dict)
    halted: bool = False

    @property
    def accounted(self) -> int:
        return self.fetched + self.cached + self.unavailable + self.failed


def _in_window(capture: dt.date | None, window) -> bool:
    if capture is None:
        return False
    # month-resolution capture dates count if their month overlaps the window
    start = window[0].replace(day=1)
    return start <= capture <= window[1]


def fetch_all(
    plan: list[ImageRequest],
    transport,
    cache: ImageCache,
    rate: float = 10.0,
    budget: Budget = Budget(),
    workers: int = 1,
    max_attempts: int = 3,
    backoff: float = 0.5,
    max_backoff: float = 8.0,
    sleep: Callable[[float], None] = time.sleep,
    limiter: RateLimiter | None = None,
) -> FetchReport:
    """Fetch every planned image not already in ``cache``.

    Transient errors are retried with capped exponential backoff. Each
    fetched image is billed at the budget's unit cost; when the next image
    would push spend past ``budget.max_usd`` the run stops and raises
    :class:`BudgetExceededError`. The manifest written so far is the
    checkpoint, so a re-run resumes where this one stopped.

    ``fetched`` counts new downloads, including images whose capture date
    falls outside the request window; those are also counted in
    ``excluded`` and stored with status ``excluded``.
    """
    report = FetchReport(planned=len(plan))
    limiter = limiter or RateLimiter(rate)
    unit = budget.unit_cost_usd_per_1000 / 1000
    spend = Decimal(0)
    lock = threading.Lock()
    stop = threading.Event()

    todo = []
    seen = set()
    for req in plan:
        rid = req.request_id
        if cache.is_final(rid) or rid in seen:
            report.cached += 1
        else:
            todo.append(req)
        seen.add(rid)

    def reserve() -> bool:
        nonlocal spend
        with lock:
            if budget.max_usd is not None and spend + unit > budget.max_usd:
                stop.set()
                return False
            spend += unit
            return True

    def refund():
        nonlocal spend
        with lock:
            spend -= unit

    def one(req: ImageRequest) -> str:
        rid = req.request_id
        if stop.is_set() or not reserve():
            return "skipped"
        attempts = 0
        result = None
        while True:
            attempts += 1
            limiter.acquire()
            try:
                result = transport.get(req)
                break
            except TransientError as e:
                log.debug("transient error for %s (attempt %d): %s", rid, attempts, e)
                if attempts >= max_attempts:
                    result = e
                    break
                sleep(min(max_backoff, backoff * 2 ** (attempts - 1)))
        with lock:
            report.attempts[rid] = attempts
        if isinstance(result, TransientError):
            refund()
            cache.put(req, "failed")
            return "failed"
        if result is NOT_AVAILABLE:
            refund()
            cache.put(req, "unavailable")
            return "unavailable"
        if _in_window(result.capture_date, req.date_window):
            cache.put(req, "fetched", result)
            return "fetched"
        cache.put(req, "excluded", result)
        return "excluded"

    if workers <= 1:
        outcomes = []
        for req in todo:
            outcomes.append(one(req))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, todo))

    for o in outcomes:
        if o == "fetched":
            report.fetched += 1
        elif o == "excluded":
            report.fetched += 1
            report.excluded += 1
        elif o == "unavailable":
            report.unavailable += 1
        elif o == "failed":
            report.failed += 1
    report.spend_usd = _cents(spend)
    if stop.is_set():
        report.halted = True
        remaining = sum(o == "skipped" for o in outcomes)
        over = _cents(unit * remaining)
        raise BudgetExceededError(
            f"budget cap ${budget.max_usd} reached after ${report.spend_usd}; "
            f"{remaining} requests left (${over} more); re-run to resume",
            over,
            report,
        )
    return report


def fetched_images(cache: ImageCache, plan: Iterable[ImageRequest]) -> list[ImageRequest]:
    """Planned requests whose image was fetched and dated inside the window."""
    return [r for r in plan if (e := cache.get(r.request_id)) is not None and e["status"] == "fetched"]


# -- plan CSV --------------------------------------------------------------

PLAN_HEADER = ["request_id", "lat", "lon", "heading_deg", "field_lat", "field_lon", "start_date", "end_date"]


def write_plan(path, plan: list[ImageRequest], field_points: dict[str, GeoPoint]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PLAN_HEADER)
        for r in plan:
            fp = field_points[r.request_id]
            w.writerow([
                r.request_id, repr(r.point.lat), repr(r.point.lon), repr(r.heading),
                repr(fp.lat), repr(fp.lon), r.date_window[0].isoformat(), r.date_window[1].isoformat(),
            ])


def read_plan(path) -> tuple[list[ImageRequest], dict[str, GeoPoint]]:
    plan, fields = [], {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            req = ImageRequest(
                GeoPoint(float(row["lat"]), float(row["lon"])),
                float(row["heading_deg"]),
                (dt.date.fromisoformat(row["start_date"]), dt.date.fromisoformat(row["end_date"])),
            )
            plan.append(req)
            fields[req.request_id] = GeoPoint(float(row["field_lat"]), float(row["field_lon"]))
    return plan, fields


def plan_with_fields(cands: Iterable[CandidatePoint], window=WET_SEASON_2022, size=(640, 640)):
    """Like :func:`plan_requests` but also returns request_id -> field point."""
    plan, fields = [], {}
    for c in cands:
        for h, fp in c.views():
            r = ImageRequest(c.street, h, window, size)
            plan.append(r)
            fields[r.request_id] = fp
    return plan, fields
