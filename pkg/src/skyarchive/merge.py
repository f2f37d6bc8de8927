"""Nightly merge of the per-CCD ingest tables into the partitioned catalog."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field

from .catalog import CatalogStore
from .errors import FrozenPartition, NightOpen
from .htm import PartitionKey, TrixelId, time_bucket
from .ingest import OPEN, IngestService


@dataclass
class MergeEntry:
    key: PartitionKey
    # (ccd_id, visit_id, row index) references into the ingest tables
    refs: list[tuple[int, int, int]] = field(default_factory=list)
    done: bool = False
    error: str | None = None


@dataclass
class MergePlan:
    night_id: int
    entries: dict[PartitionKey, MergeEntry] = field(default_factory=dict)
    total_rows: int = 0

    @property
    def complete(self) -> bool:
        return all(e.done for e in self.entries.values())

    def manifest(self) -> dict[str, list[tuple[int, int, int]]]:
        return {str(k): list(e.refs) for k, e in sorted(self.entries.items())}


@dataclass
class MergeReport:
    night_id: int
    partitions_touched: int
    rows_merged: int
    failed: list[str] = field(default_factory=list)
    elapsed_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "night_id": self.night_id,
                "partitions_touched": self.partitions_touched,
                "rows_merged": self.rows_merged,
                "failed": self.failed,
                "elapsed_s": self.elapsed_s,
            },
            sort_keys=True,
        )


class MergeService:
    def __init__(self, store: CatalogStore, ingest: IngestService):
        self.store = store
        self.ingest = ingest
        self._running = threading.Lock()

    def __getstate__(self):
        return {"store": self.store, "ingest": self.ingest}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._running = threading.Lock()

    def plan_merge(self, night_id: int | None = None) -> MergePlan:
        night = self.ingest.current_night if night_id is None else night_id
        if night == self.ingest.current_night and self.ingest.night_state == OPEN:
            raise NightOpen(f"night {night} is still staging")
        if night != self.ingest.current_night:
            raise NightOpen(f"night {night} is not the night held in the ingest tables")
        plan = MergePlan(night)
        shift = 2 * (self.store.cfg.max_level - self.store.cfg.partition_level)
        lvl = self.store.cfg.partition_level
        width = self.store.cfg.bucket_width
        for ccd, visit, idx, rec, htm in self.ingest.night_rows():
            key = PartitionKey(TrixelId(htm >> shift, lvl), time_bucket(rec.epoch, width))
            entry = plan.entries.get(key)
            if entry is None:
                entry = plan.entries[key] = MergeEntry(key)
            entry.refs.append((ccd, visit, idx))
            plan.total_rows += 1
        return plan

    def execute_merge(self, plan: MergePlan) -> MergeReport:
        """Apply every unfinished entry; finished entries are skipped.

        A frozen target marks its entry failed and leaves it resumable.
        """
        t0 = time.perf_counter()
        touched = 0
        merged = 0
        failed = []
        tables = self.ingest.tables
        with self._running, self.store.gate.shared():
            for key in sorted(plan.entries):
                entry = plan.entries[key]
                if entry.done:
                    continue
                recs = [tables[c].rows[v][i] for c, v, i in entry.refs]
                htm = [int(tables[c].htm[v][i]) for c, v, i in entry.refs]
                part = self.store.ensure_partition(key)
                try:
                    merged += self.store.insert_clustered(part, recs, htm)
                except FrozenPartition as exc:
                    entry.error = str(exc)
                    failed.append(str(key))
                    continue
                entry.done = True
                entry.error = None
                touched += 1
            # object rows follow their home partitions
            for key in sorted(self.store.home_objects):
                part = self.store.partitions.get(key)
                if part is not None and not part.frozen:
                    self.store.sync_object_rows(key)
        if plan.complete:
            self.ingest.mark_merged(plan.night_id)
        return MergeReport(plan.night_id, touched, merged, failed, time.perf_counter() - t0)

    def merge_night(self, night_id: int | None = None) -> MergeReport:
        return self.execute_merge(self.plan_merge(night_id))
