"""Immutable releases and append-only object version chains."""

from __future__ import annotations

import threading
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

from ._sync import LockState
from .catalog import AstroObject, CatalogStore
from .errors import (
    AlreadyReleased,
    QAFailed,
    UnknownObject,
    UnknownRelease,
    UnknownVersion,
)
from .htm import PartitionKey

RELEASED_POOL = "released"


@dataclass
class ObjectVersion:
    object_id: int
    version: int
    payload: AstroObject
    superseded_by: int | None = None
    created_in_release: str | None = None

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "version": self.version,
            "payload": asdict(self.payload),
            "superseded_by": self.superseded_by,
            "created_in_release": self.created_in_release,
        }


class VersionStore(LockState):
    """Per-object version chains.

    With ``retain_pre_release=False`` an intermediate version that was never
    stamped into a release is dropped once it is superseded; numbering still
    increases monotonically.
    """

    _lock_factories = {"_lock": threading.RLock}

    def __init__(self, retain_pre_release: bool = True, on_update: Callable[[AstroObject], None] | None = None):
        self.retain_pre_release = retain_pre_release
        self.on_update = on_update
        self.chains: dict[int, list[ObjectVersion]] = {}
        self._lock = threading.RLock()

    def __contains__(self, object_id: int) -> bool:
        return object_id in self.chains

    def register(self, obj: AstroObject) -> ObjectVersion:
        with self._lock:
            if obj.object_id in self.chains:
                return self._append(obj.object_id, obj)
            v = ObjectVersion(obj.object_id, 1, replace(obj, current_version=1))
            self.chains[obj.object_id] = [v]
            return v

    def new_object_version(self, object_id: int, payload: AstroObject) -> ObjectVersion:
        with self._lock:
            if object_id not in self.chains:
                raise UnknownObject(f"object {object_id} has no versions")
            return self._append(object_id, payload)

    def _append(self, object_id: int, payload: AstroObject) -> ObjectVersion:
        chain = self.chains[object_id]
        prior = chain[-1]
        number = prior.version + 1
        v = ObjectVersion(object_id, number, replace(payload, object_id=object_id, current_version=number))
        prior.superseded_by = number
        chain.append(v)
        if not self.retain_pre_release and prior.created_in_release is None and len(chain) > 1:
            chain.remove(prior)
        if self.on_update is not None:
            self.on_update(v.payload)
        return v

    def latest(self, object_id: int) -> ObjectVersion:
        try:
            return self.chains[object_id][-1]
        except KeyError:
            raise UnknownObject(f"object {object_id} has no versions") from None

    def read_versioned(self, object_id: int, selector="latest", releases: "ReleaseManager | None" = None) -> ObjectVersion:
        """Resolve ``"latest"``, an integer version, or ``"release:<id>"``."""
        chain = self.chains.get(object_id)
        if chain is None:
            raise UnknownObject(f"object {object_id} has no versions")
        if selector == "latest":
            return chain[-1]
        if isinstance(selector, str) and selector.startswith("release:"):
            rid = selector.split(":", 1)[1]
            if releases is None:
                raise UnknownRelease(rid)
            number = releases.get(rid).object_versions.get(object_id)
            if number is None:
                raise UnknownVersion(f"object {object_id} is not part of release {rid}")
            selector = number
        n = int(selector)
        for v in chain:
            if v.version == n:
                return v
        raise UnknownVersion(f"object {object_id} has no version {n}")

    def stamp(self, release_id: str, object_ids: Iterable[int]) -> dict[int, int]:
        out = {}
        with self._lock:
            for oid in object_ids:
                chain = self.chains.get(oid)
                if not chain:
                    continue
                v = chain[-1]
                if v.created_in_release is None:
                    v.created_in_release = release_id
                out[oid] = v.version
        return out

    def export_chain(self, object_id: int) -> list[dict]:
        return [v.to_dict() for v in self.chains.get(object_id, [])]


@dataclass
class QAReport:
    status: str
    validation_failures: int = 0
    expected_rows: int | None = None
    actual_rows: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "passed"


def build_qa_report(
    store: CatalogStore,
    keys: Iterable[PartitionKey],
    validation_failures: int = 0,
    expected_rows: int | None = None,
) -> QAReport:
    """Validation summary plus row-count reconciliation for a release candidate."""
    actual = sum(store.get(k).row_count for k in keys)
    notes = []
    if validation_failures:
        notes.append(f"{validation_failures} batches failed validation")
    if expected_rows is not None and expected_rows != actual:
        notes.append(f"row count {actual} does not reconcile with expected {expected_rows}")
    return QAReport("failed" if notes else "passed", validation_failures, expected_rows, actual, notes)


@dataclass
class Release:
    release_id: str
    created_at: float
    snapshot_id: str
    checksums: dict[PartitionKey, str]
    object_versions: dict[int, int] = field(default_factory=dict)
    pool: str = RELEASED_POOL
    immutable: bool = True

    @property
    def keys(self) -> list[PartitionKey]:
        return sorted(self.checksums)

    def to_dict(self) -> dict:
        return {
            "release_id": self.release_id,
            "created_at": self.created_at,
            "snapshot_id": self.snapshot_id,
            "pool": self.pool,
            "immutable": self.immutable,
            "checksums": {str(k): v for k, v in sorted(self.checksums.items())},
            "objects": len(self.object_versions),
        }


class ReleaseManager(LockState):
    _lock_factories = {"_lock": threading.Lock}

    def __init__(self, store: CatalogStore, versions: VersionStore, clock: Callable[[], float] = time.time):
        self.store = store
        self.versions = versions
        self.clock = clock
        self.releases: dict[str, Release] = {}
        self._lock = threading.Lock()

    def __getstate__(self):
        state = super().__getstate__()
        state["clock"] = None
        return state

    def __setstate__(self, state):
        super().__setstate__(state)
        self.clock = time.time

    def get(self, release_id: str) -> Release:
        try:
            return self.releases[release_id]
        except KeyError:
            raise UnknownRelease(f"no release {release_id!r}") from None

    def create_release(self, keys: Iterable[PartitionKey], qa_report: QAReport) -> Release:
        if not qa_report.passed:
            raise QAFailed("; ".join(qa_report.notes) or "QA report did not pass")
        keys = sorted(set(keys))
        with self._lock:
            for rel in self.releases.values():
                if rel.keys == keys:
                    raise AlreadyReleased(f"identical snapshot already released as {rel.release_id}")
            sid, sums = self.store.snapshot(keys)
            rid = f"r{len(self.releases) + 1}"
            homed = [oid for k in keys for oid in self.store.home_objects.get(k, ())]
            stamped = self.versions.stamp(rid, sorted(homed))
            rel = self.releases[rid] = Release(rid, self.clock(), sid, dict(sums), stamped)
        return rel

    def verify(self, release_id: str) -> dict[PartitionKey, bool]:
        """Recompute each member partition's checksum against the recorded one."""
        rel = self.get(release_id)
        return {k: self.store.checksum(k) == c for k, c in rel.checksums.items()}

    def live_keys(self) -> list[PartitionKey]:
        return [k for k in self.store.keys() if not self.store.get(k).frozen]


def release_times(year_length: float, releases_per_year: int, years: float = 1.0) -> list[float]:
    """Evenly spaced release instants over ``years`` of survey time."""
    step = year_length / releases_per_year
    n = int(round(years * releases_per_year))
    return [step * (i + 1) for i in range(n)]
