"""One site's worth of wiring: store, ingest, merge, releases, files, replicas, router."""

from __future__ import annotations

import os
import pickle
import time
from pathlib import Path
from typing import Callable

from .balancer import HeatMap, Topology
from .catalog import AstroObject, CatalogStore
from .filemap import FileMap
from .htm import IndexConfig
from .ingest import BudgetConfig, IngestConfig, IngestService
from .merge import MergeReport, MergeService
from .provenance import ProvenanceStore
from .router import Router
from .versions import ReleaseManager, VersionStore, build_qa_report

STATE_FILE = "archive.pkl"


class Archive:
    def __init__(
        self,
        index: IndexConfig | None = None,
        budget: BudgetConfig | None = None,
        ingest: IngestConfig | None = None,
        retain_pre_release: bool = True,
        clock: Callable[[], float] = time.monotonic,
        heat_window: float = 60.0,
    ):
        self.store = CatalogStore(index)
        self.versions = VersionStore(retain_pre_release, on_update=self.store.upsert_object)
        self.ingest = IngestService(self.store, budget, ingest, clock, on_object=self._on_object)
        self.merger = MergeService(self.store, self.ingest)
        self.releases = ReleaseManager(self.store, self.versions)
        self.files = FileMap()
        self.provenance = ProvenanceStore(self.store, self.releases, self.files)
        self.topology = Topology(self.store, HeatMap(heat_window, clock))
        self.router = Router(self.store, self.topology, self.releases, self.versions, self.ingest)

    def _on_object(self, obj: AstroObject, is_new: bool) -> None:
        if is_new:
            self.versions.register(obj)
        else:
            self.versions.new_object_version(obj.object_id, obj)

    def set_clock(self, clock: Callable[[], float]) -> None:
        self.ingest.clock = clock
        self.topology.heat.clock = clock

    # -- composite operations used by the CLI and the harness ---------------

    def merge_and_truncate(self, night_id: int | None = None) -> tuple[MergeReport, object]:
        self.ingest.close_night(night_id)
        report = self.merger.merge_night(night_id)
        self.topology.sync_checksums()
        return report, self.ingest.truncate_night(night_id)

    def release_live(self, validation_failures: int = 0, expected_rows: int | None = None):
        keys = self.releases.live_keys()
        qa = build_qa_report(self.store, keys, validation_failures, expected_rows)
        return self.releases.create_release(keys, qa)

    def status(self) -> dict:
        return {
            "partitions": len(self.store.partitions),
            "frozen_partitions": sum(p.frozen for p in self.store.partitions.values()),
            "catalog_rows": self.store.total_rows,
            "objects": len(self.store.objects),
            "staged_rows": self.ingest.staged_rows,
            "current_night": self.ingest.current_night,
            "night_state": self.ingest.night_state,
            "releases": sorted(self.releases.releases),
            "nodes": len(self.topology.nodes),
            "alive_nodes": sum(n.alive for n in self.topology.nodes.values()),
            "files": len(self.files.entries),
            "products": len(self.provenance.records),
        }

    # -- persistence ---------------------------------------------------------

    def save(self, directory) -> Path:
        path = Path(directory)
        path.mkdir(parents=True, exist_ok=True)
        tmp = path / (STATE_FILE + ".tmp")
        with open(tmp, "wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)
        os.replace(tmp, path / STATE_FILE)
        return path / STATE_FILE

    @classmethod
    def load(cls, directory) -> "Archive":
        path = Path(directory) / STATE_FILE
        if not path.exists():
            return cls()
        with open(path, "rb") as fh:
            return pickle.load(fh)
