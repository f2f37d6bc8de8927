"""Real-time staging ingest: validate, load per-CCD tables, associate, truncate."""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from ._sync import LockState
from .catalog import FILTERS, SOURCE_RECORD_BYTES, AstroObject, CatalogStore, SourceRecord
from .errors import MergePending, NightClosed, SimulatedCrash, ValidationRequired
from .htm import radec_to_vector, separation, trixel_ids

ARCHIVE = "archive"
BASE = "base"

OPEN = "open"
CLOSED = "closed"


@dataclass(frozen=True)
class BudgetConfig:
    alert_latency_budget: float = 60.0
    per_image_ingest_budget: float = 3.0
    visit_cadence: float = 13.0
    ccd_count: int = 200
    night_length: float = 36000.0
    target_ingest_rate: float = 35e6  # bytes per second
    releases_per_year: int = 2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class IngestConfig:
    role: str = ARCHIVE
    match_radius_arcsec: float = 1.0
    alert_sigma: float = 5.0
    min_prior_sources: int = 3
    max_batch_records: int = 100_000
    # Seconds between consecutive night starts on the survey clock.
    day_length: float = 86400.0
    # Per-visit straggler timeout; defaults to the visit cadence.
    visit_timeout: float | None = None

    def __post_init__(self):
        if self.role not in (ARCHIVE, BASE):
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class DetectionBatch:
    visit_id: int
    ccd_id: int
    server_id: str
    records: list[SourceRecord]
    received_at: float = 0.0
    night_id: int | None = None
    validated: bool = field(default=False, compare=False, repr=False)

    def header(self) -> dict:
        return {"visit_id": self.visit_id, "ccd_id": self.ccd_id, "server_id": self.server_id}

    def to_ndjson(self) -> str:
        lines = [json.dumps(self.header(), separators=(",", ":"))]
        lines.extend(r.to_json() for r in self.records)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_ndjson(cls, text: str, received_at: float = 0.0) -> "DetectionBatch":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty batch file")
        head = json.loads(lines[0])
        missing = {"visit_id", "ccd_id", "server_id"} - head.keys()
        if missing:
            raise ValueError(f"batch header missing {sorted(missing)}")
        records = [SourceRecord.from_dict(json.loads(ln)) for ln in lines[1:]]
        return cls(
            visit_id=int(head["visit_id"]),
            ccd_id=int(head["ccd_id"]),
            server_id=str(head["server_id"]),
            records=records,
            received_at=received_at,
            night_id=head.get("night_id"),
        )


@dataclass(frozen=True)
class Violation:
    index: int  # record index, -1 for batch-level problems
    check: str

    def __str__(self):
        return f"record {self.index}: {self.check}" if self.index >= 0 else self.check


@dataclass
class ValidationReport:
    n_records: int
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class StageResult:
    accepted_rows: int
    duplicate: bool
    elapsed: float


@dataclass
class TruncateReport:
    night_id: int
    tables_truncated: int
    rows_dropped: int


@dataclass(frozen=True)
class Alert:
    alert_type: str
    object_id: int
    source_id: int
    latency_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass
class AssociationResult:
    visit_id: int
    matched: list[tuple[int, int]] = field(default_factory=list)
    new_objects: list[int] = field(default_factory=list)
    alerts: list[Alert] = field(default_factory=list)


class _StagingArea:
    """Throw-away columnar copy of a batch that validation queries run on."""

    def __init__(self, records: list[SourceRecord]):
        n = len(records)
        self.ra = np.fromiter((r.ra for r in records), np.float64, n)
        self.dec = np.fromiter((r.dec for r in records), np.float64, n)
        self.epoch = np.fromiter((r.epoch for r in records), np.float64, n)
        self.flux = np.fromiter((r.flux for r in records), np.float64, n)
        self.source_id = np.fromiter((r.source_id for r in records), np.int64, n)
        self.visit_id = np.fromiter((r.visit_id for r in records), np.int64, n)
        self.ccd_id = np.fromiter((r.ccd_id for r in records), np.int64, n)
        self.filter = [r.filter for r in records]


class IngestTable(LockState):
    _lock_factories = {"lock": threading.Lock}

    def __init__(self, ccd_id: int, night_id: int = 0):
        self.ccd_id = ccd_id
        self.night_id = night_id
        self.rows: dict[int, list[SourceRecord]] = {}
        self.htm: dict[int, np.ndarray] = {}
        self.received_at: dict[int, float] = {}
        self.loaded_visits: set[int] = set()
        self.lock = threading.Lock()

    @property
    def row_count(self) -> int:
        return sum(len(self.rows[v]) for v in self.loaded_visits)

    def truncate(self, night_id: int) -> int:
        with self.lock:
            dropped = sum(len(v) for v in self.rows.values())
            self.rows.clear()
            self.htm.clear()
            self.received_at.clear()
            self.loaded_visits.clear()
            self.night_id = night_id
        return dropped


class IngestService(LockState):
    """Per-CCD staging tables plus the association step that reads them."""

    _lock_factories = {"_lock": threading.RLock}

    def __init__(
        self,
        store: CatalogStore,
        budget: BudgetConfig | None = None,
        config: IngestConfig | None = None,
        clock: Callable[[], float] = time.monotonic,
        on_object: Callable[[AstroObject, bool], None] | None = None,
    ):
        self.store = store
        self.budget = budget or BudgetConfig()
        self.config = config or IngestConfig()
        self.clock = clock
        self.on_object = on_object
        self.current_night = 0
        self.night_state = OPEN
        self.merged_nights: set[int] = set()
        self.tables = [IngestTable(c) for c in range(self.budget.ccd_count)]
        self.stage_elapsed: list[float] = []
        self.visit_ccds: dict[int, set[int]] = {}
        self.visit_first_received: dict[int, float] = {}
        self.associated: set[int] = set()
        self._lock = threading.RLock()

    def __getstate__(self):
        state = super().__getstate__()
        state["clock"] = None
        return state

    def __setstate__(self, state):
        super().__setstate__(state)
        self.clock = time.monotonic

    # -- validation ----------------------------------------------------------

    def night_window(self, night_id: int | None = None) -> tuple[float, float]:
        n = self.current_night if night_id is None else night_id
        start = n * self.config.day_length
        return start, start + self.budget.night_length

    def validate_staged(self, batch: DetectionBatch) -> ValidationReport:
        recs = batch.records
        report = ValidationReport(len(recs))
        v = report.violations
        if len(recs) > self.config.max_batch_records:
            v.append(Violation(-1, f"record count {len(recs)} exceeds max {self.config.max_batch_records}"))
        if not 0 <= batch.ccd_id < self.budget.ccd_count:
            v.append(Violation(-1, f"ccd_id {batch.ccd_id} out of range"))
        if recs:
            s = _StagingArea(recs)
            lo, hi = self.night_window(batch.night_id)
            with np.errstate(invalid="ignore"):
                checks = [
                    ((s.visit_id != batch.visit_id) | (s.ccd_id != batch.ccd_id), "visit/ccd mismatch with header"),
                    (~((s.ra >= 0.0) & (s.ra < 360.0)), "ra out of range"),
                    (~((s.dec >= -90.0) & (s.dec <= 90.0)), "dec out of range"),
                    (~np.isfinite(s.flux), "flux not finite"),
                    (s.flux < 0.0, "flux negative"),
                    (~((s.epoch >= lo) & (s.epoch <= hi)), "epoch outside night window"),
                ]
            for mask, name in checks:
                v.extend(Violation(int(i), name) for i in np.flatnonzero(mask))
            order = np.argsort(s.source_id, kind="stable")
            srt = s.source_id[order]
            dup = np.flatnonzero(srt[1:] == srt[:-1]) + 1
            v.extend(Violation(int(order[i]), "duplicate source_id") for i in dup)
            v.extend(Violation(i, "unknown filter") for i, f in enumerate(s.filter) if f not in FILTERS)
            v.sort(key=lambda x: x.index)
        batch.validated = report.ok
        return report

    # -- staging -------------------------------------------------------------

    def stage_batch(self, batch: DetectionBatch, crash_after: int | None = None) -> StageResult:
        """Append a validated batch to its CCD table.

        ``crash_after`` injects a failure after that many rows were written;
        replaying the same batch afterwards discards the partial rows.
        """
        if not batch.validated:
            raise ValidationRequired(f"batch visit {batch.visit_id} ccd {batch.ccd_id} was not validated")
        night = self.current_night if batch.night_id is None else batch.night_id
        if night != self.current_night or self.night_state != OPEN:
            raise NightClosed(f"night {night} is not open for staging")
        table = self.tables[batch.ccd_id]
        t0 = time.perf_counter()
        with table.lock:
            if batch.visit_id in table.loaded_visits:
                result = StageResult(0, True, time.perf_counter() - t0)
            else:
                recs = batch.records
                htm = trixel_ids([r.ra for r in recs], [r.dec for r in recs], self.store.cfg.max_level)
                rows = table.rows[batch.visit_id] = []
                if crash_after is not None:
                    rows.extend(recs[:crash_after])
                    raise SimulatedCrash(f"crash after {len(rows)} rows")
                rows.extend(recs)
                table.htm[batch.visit_id] = htm
                table.received_at[batch.visit_id] = batch.received_at
                table.loaded_visits.add(batch.visit_id)
                result = StageResult(len(recs), False, time.perf_counter() - t0)
        with self._lock:
            self.stage_elapsed.append(result.elapsed)
            if not result.duplicate:
                self.visit_ccds.setdefault(batch.visit_id, set()).add(batch.ccd_id)
                self.visit_first_received.setdefault(batch.visit_id, batch.received_at)
        return result

    def ingest(self, batch: DetectionBatch) -> tuple[ValidationReport, StageResult | None]:
        report = self.validate_staged(batch)
        return report, (self.stage_batch(batch) if report.ok else None)

    def read_for_association(self, ccd_id: int, visit_id: int) -> list[SourceRecord]:
        table = self.tables[ccd_id]
        with table.lock:
            if visit_id not in table.loaded_visits:
                return []
            return list(table.rows[visit_id])

    def night_rows(self) -> Iterator[tuple[int, int, int, SourceRecord, int]]:
        """(ccd, visit, index, record, max-level trixel) for every committed row."""
        for table in self.tables:
            with table.lock:
                visits = sorted(table.loaded_visits)
                snap = [(v, table.rows[v], table.htm[v]) for v in visits]
            for v, rows, htm in snap:
                for i, r in enumerate(rows):
                    yield table.ccd_id, v, i, r, int(htm[i])

    @property
    def staged_rows(self) -> int:
        return sum(t.row_count for t in self.tables)

    def export_ndjson(self, ccd_id: int | None = None) -> str:
        tables = self.tables if ccd_id is None else [self.tables[ccd_id]]
        out = []
        for t in tables:
            with t.lock:
                for v in sorted(t.loaded_visits):
                    out.extend(r.to_json() + "\n" for r in t.rows[v])
        return "".join(out)

    # -- night lifecycle ----------------------------------------------------

    def close_night(self, night_id: int | None = None) -> None:
        night = self.current_night if night_id is None else night_id
        if night != self.current_night:
            raise NightClosed(f"night {night} is not the current night")
        self.night_state = CLOSED

    def mark_merged(self, night_id: int) -> None:
        self.merged_nights.add(night_id)

    def truncate_night(self, night_id: int | None = None) -> TruncateReport:
        night = self.current_night if night_id is None else night_id
        if self.config.role == ARCHIVE and night not in self.merged_nights:
            raise MergePending(f"night {night} has not been merged")
        with self._lock:
            dropped = sum(t.truncate(night + 1) for t in self.tables)
            self.current_night = night + 1
            self.night_state = OPEN
            self.visit_ccds.clear()
            self.visit_first_received.clear()
            self.associated.clear()
        return TruncateReport(night, len(self.tables), dropped)

    # -- association ---------------------------------------------------------

    def visit_ready(self, visit_id: int, now: float | None = None) -> bool:
        """All CCDs staged, or the straggler timeout has run out."""
        ccds = self.visit_ccds.get(visit_id)
        if ccds is None:
            return False
        if len(ccds) >= self.budget.ccd_count:
            return True
        timeout = self.config.visit_timeout or self.budget.visit_cadence
        now = self.clock() if now is None else now
        return now - self.visit_first_received[visit_id] >= timeout

    def associate(self, visit_id: int, now: float | None = None) -> AssociationResult:
        result = AssociationResult(visit_id)
        batch: list[tuple[SourceRecord, int, float]] = []
        for table in self.tables:
            with table.lock:
                if visit_id in table.loaded_visits:
                    rec_at = table.received_at[visit_id]
                    batch.extend((r, int(h), rec_at) for r, h in zip(table.rows[visit_id], table.htm[visit_id]))
        if not batch:
            return result
        radius = self.config.match_radius_arcsec / 3600.0
        store = self.store

        # Match everything against history first so sources of this visit
        # never match objects created by the same visit.
        targets: list[int | None] = []
        for r, h, _ in batch:
            best = None
            best_d = math.inf
            for obj in store.objects_near(r.ra, r.dec, radius, h):
                d = separation(r.ra, r.dec, obj.ra, obj.dec)
                if d <= radius and (d < best_d or (d == best_d and obj.object_id < best)):
                    best, best_d = obj.object_id, d
            targets.append(best)

        pending: list[tuple[str, int, int, float]] = []
        for (r, _, rec_at), oid in zip(batch, targets):
            if oid is None:
                obj = AstroObject(
                    object_id=store.new_object_id(), ra=r.ra, dec=r.dec,
                    first_epoch=r.epoch, last_epoch=r.epoch, n_sources=1,
                    flux_mean=r.flux, flux_m2=0.0,
                )
                store.upsert_object(obj)
                if self.on_object:
                    self.on_object(obj, True)
                result.new_objects.append(obj.object_id)
                pending.append(("new_object", obj.object_id, r.source_id, rec_at))
                continue
            obj = store.objects[oid]
            result.matched.append((r.source_id, oid))
            if obj.n_sources >= self.config.min_prior_sources and (
                abs(r.flux - obj.flux_mean) > self.config.alert_sigma * obj.flux_std
            ):
                pending.append(("flux_anomaly", oid, r.source_id, rec_at))
            updated = _absorb(obj, r)
            store.upsert_object(updated)
            if self.on_object:
                self.on_object(updated, False)

        t_alert = self.clock() if now is None else now
        result.alerts = [Alert(kind, oid, sid, t_alert - rec_at) for kind, oid, sid, rec_at in pending]
        with self._lock:
            self.associated.add(visit_id)
        return result

    def achieved_rate(self, wall_seconds: float) -> float:
        rows = self.staged_rows
        return rows * SOURCE_RECORD_BYTES / wall_seconds if wall_seconds > 0 else 0.0


def _absorb(obj: AstroObject, r: SourceRecord) -> AstroObject:
    n = obj.n_sources + 1
    # mean position via unit-vector average, robust to the RA wrap
    ox, oy, oz = radec_to_vector(obj.ra, obj.dec)
    px, py, pz = radec_to_vector(r.ra, r.dec)
    k = obj.n_sources
    x, y, z = ox * k + px, oy * k + py, oz * k + pz
    norm = math.sqrt(x * x + y * y + z * z)
    ra = math.degrees(math.atan2(y, x)) % 360.0
    if ra >= 360.0:
        ra = 0.0
    dec = math.degrees(math.asin(max(-1.0, min(1.0, z / norm))))
    delta = r.flux - obj.flux_mean
    mean = obj.flux_mean + delta / n
    m2 = obj.flux_m2 + delta * (r.flux - mean)
    return AstroObject(
        object_id=obj.object_id, ra=ra, dec=dec,
        first_epoch=min(obj.first_epoch, r.epoch), last_epoch=max(obj.last_epoch, r.epoch),
        n_sources=n, current_version=obj.current_version + 1,
        flux_mean=mean, flux_m2=m2,
    )
