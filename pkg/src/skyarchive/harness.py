"""Synthetic observing nights driven through the whole pipeline."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO

import numpy as np

from .archive import Archive
from .catalog import FILTERS, SOURCE_RECORD_BYTES, SourceRecord
from .errors import ArchiveError, ConfigError
from .ingest import ARCHIVE, BASE, BudgetConfig, DetectionBatch, IngestConfig

SERVERS = ("A", "B")
INGEST_NODE = "ingest-{}"

# Metric fields that carry wall-clock measurements and so vary run to run.
WALL_FIELDS = frozenset(
    {"elapsed_s", "wall_s", "stage_p50_s", "stage_p99_s", "stage_p100_s", "achieved_mb_per_s"}
)


@dataclass(frozen=True)
class FailureEvent:
    node_id: str
    fail_at: float
    recover_at: float | None = None

    @classmethod
    def parse(cls, text: str) -> "FailureEvent":
        # "<node>@<fail>[-<recover>]", times in seconds from night start
        node, _, when = text.strip().partition("@")
        if not node or not when:
            raise ConfigError(f"bad failure entry {text!r}; expected node@start[-end]")
        start, _, end = when.partition("-")
        return cls(node, float(start), float(end) if end else None)


@dataclass
class SimConfig:
    seed: int = 0
    cadence: float = 13.0
    night_length: float = 36000.0
    night_id: int = 0
    visits: int | None = None
    persistent_per_ccd: float = 1.0
    transient_rate: float = 0.05
    detection_prob: float = 0.9
    flare_prob: float = 0.002
    n_fields: int = 16
    ccd_size_deg: float = 0.2
    real_time: bool = False
    role: str = ARCHIVE
    merge: bool = True
    # modeled receipt-to-alert delay on the simulated clock; None uses the
    # per-image ingest budget
    sim_processing_delay: float | None = None
    failure_schedule: list[FailureEvent] = field(default_factory=list)

    def __post_init__(self):
        for name in ("cadence", "night_length", "n_fields", "ccd_size_deg"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("persistent_per_ccd", "transient_rate", "flare_prob", "sim_processing_delay"):
            if (getattr(self, name) or 0) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.detection_prob <= 1:
            raise ConfigError("detection_prob must lie in [0, 1]")
        if self.visits is not None and self.visits < 0:
            raise ConfigError("visits must be non-negative")
        if self.role not in (ARCHIVE, BASE):
            raise ConfigError(f"unknown role {self.role!r}")

    @property
    def n_visits(self) -> int:
        if self.visits is not None:
            return self.visits
        return int(math.floor(self.night_length / self.cadence))


@dataclass
class NightReport:
    night_id: int
    visits: int
    batches_received: int = 0
    rows_received: int = 0
    rows_staged: int = 0
    dup_batches: int = 0
    dup_rows: int = 0
    batches_missed: int = 0
    validation_failures: int = 0
    visits_complete: int = 0
    stage_p50_s: float = 0.0
    stage_p99_s: float = 0.0
    stage_p100_s: float = 0.0
    alerts: int = 0
    new_objects: int = 0
    matched_sources: int = 0
    alert_latency_p50_s: float = 0.0
    alert_latency_p99_s: float = 0.0
    alert_latency_p100_s: float = 0.0
    merge: dict = field(default_factory=dict)
    rows_merged: int = 0
    rows_truncated: int = 0
    failures_injected: int = 0
    failures_survived: int = 0
    errors: list[str] = field(default_factory=list)
    achieved_mb_per_s: float = 0.0
    wall_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def reconciles(self) -> bool:
        ok = self.rows_received == self.rows_staged + self.dup_rows
        if self.merge:
            ok = ok and self.rows_merged == self.rows_staged
        return ok


class MetricsStream:
    """ND-JSON event sink; keeps an in-memory copy for inspection."""

    def __init__(self, out: IO[str] | None = None):
        self.out = out
        self.events: list[dict] = []

    def emit(self, event: str, t: float, **fields) -> dict:
        doc = {"event": event, "t": t, **fields}
        self.events.append(doc)
        if self.out is not None:
            self.out.write(json.dumps(doc, sort_keys=True) + "\n")
        return doc

    def deterministic(self) -> list[dict]:
        return [strip_wall(e) for e in self.events]


def strip_wall(event: dict) -> dict:
    out = {}
    for k, v in event.items():
        if k in WALL_FIELDS:
            continue
        out[k] = strip_wall(v) if isinstance(v, dict) else v
    return out


def _percentile(values, q) -> float:
    return float(np.percentile(values, q)) if len(values) else 0.0


class SkyModel:
    """Deterministic synthetic sky: persistent objects plus one-visit transients."""

    GRID_COLS = 20

    def __init__(self, cfg: SimConfig, ccd_count: int = 200):
        self.cfg = cfg
        self.ccd_count = ccd_count
        rng = np.random.default_rng([cfg.seed, 0])
        self.field_ra = rng.uniform(0.0, 360.0, cfg.n_fields)
        self.field_dec = np.degrees(np.arcsin(rng.uniform(-0.85, 0.85, cfg.n_fields)))
        self.persistent: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        for f in range(cfg.n_fields):
            counts = rng.poisson(cfg.persistent_per_ccd, ccd_count)
            for c in range(ccd_count):
                n = int(counts[c])
                ra, dec = self._place(f, c, rng.uniform(size=n), rng.uniform(size=n))
                flux = rng.lognormal(mean=4.0, sigma=1.0, size=n)
                self.persistent[(f, c)] = (ra, dec, flux)

    def _place(self, f: int, c: int, u: np.ndarray, v: np.ndarray):
        size = self.cfg.ccd_size_deg
        col, row = c % self.GRID_COLS, c // self.GRID_COLS
        rows = math.ceil(self.ccd_count / self.GRID_COLS)
        dec0 = self.field_dec[f] + (row - rows / 2) * size
        dec = dec0 + v * size
        cosd = max(math.cos(math.radians(self.field_dec[f])), 0.1)
        ra = (self.field_ra[f] + ((col - self.GRID_COLS / 2) + u) * size / cosd) % 360.0
        return ra, np.clip(dec, -90.0, 90.0)

    def visit_id(self, k: int) -> int:
        return self.cfg.night_id * 100_000 + k

    def visit(self, k: int, epoch: float) -> list[list[SourceRecord]]:
        """Source lists for every CCD of visit ``k``."""
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 1, cfg.night_id, k])
        f = k % cfg.n_fields
        visit_id = self.visit_id(k)
        filt = FILTERS[k % len(FILTERS)]
        n_trans = rng.poisson(cfg.transient_rate, self.ccd_count)
        out = []
        jitter = 0.05 / 3600.0
        for c in range(self.ccd_count):
            ra0, dec0, flux0 = self.persistent[(f, c)]
            n = len(ra0)
            recs: list[SourceRecord] = []
            if n:
                seen = rng.uniform(size=n) < cfg.detection_prob
                dra = rng.normal(0.0, jitter, n)
                ddec = rng.normal(0.0, jitter, n)
                noise = rng.normal(1.0, 0.05, n)
                flare = rng.uniform(size=n) < cfg.flare_prob
                for i in np.flatnonzero(seen):
                    dec = float(np.clip(dec0[i] + ddec[i], -90.0, 90.0))
                    ra = float((ra0[i] + dra[i] / max(math.cos(math.radians(dec)), 1e-3)) % 360.0)
                    flux = float(max(flux0[i] * noise[i] * (20.0 if flare[i] else 1.0), 0.0))
                    recs.append(SourceRecord(0, visit_id, c, ra, dec, epoch, flux, filt))
            m = int(n_trans[c])
            if m:
                tra, tdec = self._place(f, c, rng.uniform(size=m), rng.uniform(size=m))
                tflux = rng.lognormal(3.0, 1.0, m)
                for j in range(m):
                    recs.append(SourceRecord(0, visit_id, c, float(tra[j]), float(tdec[j]), epoch, float(tflux[j]), filt))
            out.append([
                SourceRecord(visit_id * 1_000_000 + c * 5000 + i, r.visit_id, r.ccd_id, r.ra, r.dec, r.epoch, r.flux, r.filter)
                for i, r in enumerate(recs)
            ])
        return out


class SimClock:
    def __init__(self, t: float = 0.0):
        self.t = t

    def __call__(self) -> float:
        return self.t


def ensure_ingest_servers(archive: Archive) -> None:
    for s in SERVERS:
        node = INGEST_NODE.format(s)
        if node not in archive.topology.nodes:
            archive.topology.add_node(node, "base", farm="ingest", capacity=0)


def simulate_night(
    config: SimConfig,
    archive: Archive | None = None,
    budget: BudgetConfig | None = None,
    metrics: MetricsStream | None = None,
    alert_sink: IO[str] | None = None,
) -> NightReport:
    """Drive one observing night: generate, validate, stage, associate, merge, truncate."""
    budget = budget or (archive.ingest.budget if archive is not None else BudgetConfig())
    metrics = metrics or MetricsStream()
    wall0 = time.perf_counter()
    if config.real_time:
        mono0 = time.monotonic()
        clock = lambda: time.monotonic() - mono0  # noqa: E731
    else:
        clock = SimClock()
    if archive is None:
        archive = Archive(budget=budget, ingest=IngestConfig(role=config.role), clock=clock)
    else:
        archive.set_clock(clock)
    ingest = archive.ingest
    if ingest.current_night != config.night_id:
        raise ConfigError(f"archive is at night {ingest.current_night}, config asks for {config.night_id}")
    ensure_ingest_servers(archive)
    night_start, _ = ingest.night_window(config.night_id)
    delay = budget.per_image_ingest_budget if config.sim_processing_delay is None else config.sim_processing_delay
    sky = SkyModel(config, budget.ccd_count)
    n_visits = config.n_visits
    report = NightReport(config.night_id, n_visits)
    latencies: list[float] = []
    stage_times: list[float] = []

    pending = []
    for ev in config.failure_schedule:
        pending.append((ev.fail_at, "fail", ev.node_id))
        if ev.recover_at is not None:
            pending.append((ev.recover_at, "recover", ev.node_id))
    pending.sort(key=lambda e: (e[0], e[1], e[2]))
    metrics.emit("night_start", 0.0, night_id=config.night_id, visits=n_visits, seed=config.seed)

    for k in range(n_visits):
        t_visit = k * config.cadence
        if config.real_time:
            ahead = t_visit - clock()
            if ahead > 0:
                time.sleep(ahead)
        else:
            clock.t = t_visit
        while pending and pending[0][0] <= t_visit:
            at, action, node = pending.pop(0)
            try:
                if action == "fail":
                    archive.topology.fail_node(node)
                    report.failures_injected += 1
                else:
                    archive.topology.recover_node(node)
            except ArchiveError as exc:
                report.errors.append(f"{action} {node}: {exc}")
            metrics.emit(action, at, node_id=node)

        visit_id = sky.visit_id(k)
        per_ccd = sky.visit(k, night_start + t_visit)
        v_rows = v_dups = v_missed = 0
        for ccd, recs in enumerate(per_ccd):
            delivered = False
            for server in SERVERS:
                if not archive.topology.alive(INGEST_NODE.format(server)):
                    continue
                batch = DetectionBatch(visit_id, ccd, server, recs, received_at=clock(), night_id=config.night_id)
                report.batches_received += 1
                report.rows_received += len(recs)
                rep = ingest.validate_staged(batch)
                if not rep.ok:
                    report.validation_failures += 1
                    continue
                try:
                    res = ingest.stage_batch(batch)
                except ArchiveError as exc:
                    report.errors.append(f"visit {visit_id} ccd {ccd}: {exc}")
                    continue
                delivered = True
                stage_times.append(res.elapsed)
                if res.duplicate:
                    report.dup_batches += 1
                    report.dup_rows += len(recs)
                    v_dups += 1
                else:
                    report.rows_staged += res.accepted_rows
                    v_rows += res.accepted_rows
            if not delivered:
                v_missed += 1
        report.batches_missed += v_missed
        if v_missed == 0:
            report.visits_complete += 1
        if report.failures_injected and v_missed == 0:
            report.failures_survived += 1

        if config.real_time:
            result = ingest.associate(visit_id)
        else:
            clock.t = t_visit + delay
            result = ingest.associate(visit_id)
        report.new_objects += len(result.new_objects)
        report.matched_sources += len(result.matched)
        report.alerts += len(result.alerts)
        for a in result.alerts:
            latencies.append(a.latency_s)
            if alert_sink is not None:
                alert_sink.write(a.to_json() + "\n")
        metrics.emit(
            "visit", t_visit, visit_id=visit_id, rows=v_rows, dup_batches=v_dups, missed_ccds=v_missed,
            new_objects=len(result.new_objects), matched=len(result.matched), alerts=len(result.alerts),
            max_latency_s=max((a.latency_s for a in result.alerts), default=0.0),
        )

    end_t = config.night_length
    if not config.real_time:
        clock.t = end_t
    try:
        ingest.close_night(config.night_id)
        if config.role == ARCHIVE and config.merge:
            merge_report = archive.merger.merge_night(config.night_id)
            archive.topology.sync_checksums()
            report.merge = json.loads(merge_report.to_json())
            report.rows_merged = merge_report.rows_merged
            metrics.emit("merge", end_t, **report.merge)
        if config.role == BASE or config.merge:
            trunc = ingest.truncate_night(config.night_id)
            report.rows_truncated = trunc.rows_dropped
            metrics.emit("truncate", end_t, tables_truncated=trunc.tables_truncated, rows_dropped=trunc.rows_dropped)
    except ArchiveError as exc:
        report.errors.append(str(exc))

    report.stage_p50_s = _percentile(stage_times, 50)
    report.stage_p99_s = _percentile(stage_times, 99)
    report.stage_p100_s = max(stage_times, default=0.0)
    report.alert_latency_p50_s = _percentile(latencies, 50)
    report.alert_latency_p99_s = _percentile(latencies, 99)
    report.alert_latency_p100_s = max(latencies, default=0.0)
    report.wall_s = time.perf_counter() - wall0
    report.achieved_mb_per_s = report.rows_staged * SOURCE_RECORD_BYTES / 1e6 / report.wall_s if report.wall_s else 0.0
    metrics.emit("night_report", end_t, **report.to_dict())
    return report


# -- flat key-value config files -----------------------------------------------

_SIM_KEYS = {f.name: f for f in fields(SimConfig)}
_BUDGET_KEYS = {f.name: f for f in fields(BudgetConfig)}


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str) -> tuple[SimConfig, BudgetConfig]:
    """Parse ``key = value`` lines; ``failure = node@start[-end]`` may repeat."""
    sim_kw: dict = {}
    budget_kw: dict = {}
    failures = []
    sim_defaults = SimConfig()
    budget_defaults = BudgetConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        try:
            if key in ("failure", "failure_schedule"):
                failures.extend(FailureEvent.parse(v) for v in value.split(",") if v.strip())
            elif key == "visits":
                sim_kw[key] = int(value)
            elif key == "sim_processing_delay":
                sim_kw[key] = float(value)
            elif key in _SIM_KEYS:
                sim_kw[key] = _coerce(value, getattr(sim_defaults, key))
            elif key in _BUDGET_KEYS:
                budget_kw[key] = _coerce(value, getattr(budget_defaults, key))
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    if "visit_cadence" in budget_kw and "cadence" not in sim_kw:
        sim_kw["cadence"] = budget_kw["visit_cadence"]
    if "night_length" in budget_kw and "night_length" not in sim_kw:
        sim_kw["night_length"] = budget_kw["night_length"]
    try:
        budget = BudgetConfig(**budget_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return SimConfig(failure_schedule=failures, **sim_kw), budget


def load_config(path) -> tuple[SimConfig, BudgetConfig]:
    return parse_config(Path(path).read_text())
