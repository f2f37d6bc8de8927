"""Partitioned, append-oriented catalog store clustered on the spatial key."""

from __future__ import annotations

import bisect
import hashlib
import json
import math
import struct
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Iterator

import numpy as np

from ._sync import LockState, RWLock
from .errors import (
    AlreadyFrozen,
    DuplicatePartition,
    FrozenPartition,
    UnknownPartition,
    WrongPartition,
)
from .htm import (
    ConeQuery,
    IndexChunk,
    IndexConfig,
    PartitionKey,
    TrixelId,
    cone_cover,
    contains_point,
    expand_to_level,
    min_edge_distance,
    radec_to_vectors,
    time_bucket,
    trixel_ids,
    trixel_of,
)

FILTERS = ("u", "g", "r", "i", "z", "y")

LIVE = "live"
FROZEN = "frozen-in-release"

# Re-sort the whole partition when a write is larger than this fraction of it.
RESORT_FRACTION = 0.25


@dataclass(frozen=True, slots=True)
class SourceRecord:
    source_id: int
    visit_id: int
    ccd_id: int
    ra: float
    dec: float
    epoch: float
    flux: float
    filter: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "SourceRecord":
        return cls(
            source_id=int(d["source_id"]),
            visit_id=int(d["visit_id"]),
            ccd_id=int(d["ccd_id"]),
            ra=float(d["ra"]),
            dec=float(d["dec"]),
            epoch=float(d["epoch"]),
            flux=float(d["flux"]),
            filter=str(d["filter"]),
        )

    @property
    def locator(self) -> tuple[int, int, int]:
        return (self.visit_id, self.ccd_id, self.source_id)


SOURCE_FIELDS = tuple(f.name for f in fields(SourceRecord))


@dataclass(frozen=True, slots=True)
class AstroObject:
    object_id: int
    ra: float
    dec: float
    first_epoch: float
    last_epoch: float
    n_sources: int
    current_version: int = 1
    # Running flux statistics (Welford) used for anomaly alerts.
    flux_mean: float = 0.0
    flux_m2: float = 0.0

    @property
    def flux_std(self) -> float:
        if self.n_sources < 2:
            return 0.0
        return math.sqrt(self.flux_m2 / (self.n_sources - 1))

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


_SOURCE_STRUCT = struct.Struct("<Qqhdddd1s")
_OBJECT_STRUCT = struct.Struct("<Qddddqqdd")
SOURCE_RECORD_BYTES = _SOURCE_STRUCT.size
OBJECT_RECORD_BYTES = _OBJECT_STRUCT.size


def encode_source(r: SourceRecord) -> bytes:
    return _SOURCE_STRUCT.pack(
        r.source_id, r.visit_id, r.ccd_id, r.ra, r.dec, r.epoch, r.flux, r.filter.encode("ascii")
    )


def encode_object(o: AstroObject) -> bytes:
    return _OBJECT_STRUCT.pack(
        o.object_id, o.ra, o.dec, o.first_epoch, o.last_epoch,
        o.n_sources, o.current_version, o.flux_mean, o.flux_m2,
    )


def content_hash(chunks: Iterable[bytes]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def sort_key(htm_id: int, r: SourceRecord) -> tuple:
    # Ties on (trixel, epoch) fall back to the row locator for determinism.
    return (htm_id, r.epoch, r.visit_id, r.ccd_id, r.source_id)


class Partition(LockState):
    """One (trixel prefix, time bucket) slice of the catalog."""

    _lock_factories = {"lock": threading.Lock}

    def __init__(self, key: PartitionKey, cfg: IndexConfig):
        self.key = key
        self.cfg = cfg
        self.rows: list[SourceRecord] = []
        self._keys: list[tuple] = []
        self.object_rows: dict[int, AstroObject] = {}
        self.state = LIVE
        self.frozen_checksum: str | None = None
        self.lock = threading.Lock()
        self._arrays = None

    @property
    def row_count(self) -> int:
        return len(self.rows)

    @property
    def byte_size(self) -> int:
        return len(self.rows) * SOURCE_RECORD_BYTES + len(self.object_rows) * OBJECT_RECORD_BYTES

    @property
    def frozen(self) -> bool:
        return self.state == FROZEN

    def __repr__(self):
        return f"Partition({self.key}, rows={self.row_count}, state={self.state})"

    def _check_writable(self):
        if self.frozen:
            raise FrozenPartition(f"partition {self.key} is frozen in a release")

    def insert(self, records: list[SourceRecord], htm_ids=None) -> int:
        if not records:
            self._check_writable()
            return 0
        if htm_ids is None:
            htm_ids = trixel_ids([r.ra for r in records], [r.dec for r in records], self.cfg.max_level)
        shift = 2 * (self.cfg.max_level - self.cfg.partition_level)
        prefixes = np.asarray(htm_ids) >> shift
        if np.any(prefixes != self.key.trixel.id):
            bad = records[int(np.argmax(prefixes != self.key.trixel.id))]
            raise WrongPartition(f"source {bad.source_id} does not map to {self.key}")
        width = self.cfg.bucket_width
        for r in records:
            if time_bucket(r.epoch, width) != self.key.bucket:
                raise WrongPartition(f"source {r.source_id} epoch {r.epoch} outside bucket {self.key.bucket}")
        incoming = sorted(
            ((sort_key(int(h), r), r) for h, r in zip(htm_ids, records)), key=lambda kr: kr[0]
        )
        with self.lock:
            self._check_writable()
            if len(incoming) > RESORT_FRACTION * len(self.rows):
                pairs = sorted(list(zip(self._keys, self.rows)) + incoming, key=lambda kr: kr[0])
                self._keys = [k for k, _ in pairs]
                self.rows = [r for _, r in pairs]
            else:
                for k, r in incoming:
                    i = bisect.bisect_right(self._keys, k)
                    self._keys.insert(i, k)
                    self.rows.insert(i, r)
            self._arrays = None
        return len(records)

    def set_objects(self, objects: dict[int, AstroObject]) -> None:
        with self.lock:
            self._check_writable()
            self.object_rows = dict(objects)

    def arrays(self):
        """Cached (unit vectors, epochs) for vectorized predicates."""
        cached = self._arrays
        if cached is None:
            rows = self.rows
            vec = radec_to_vectors([r.ra for r in rows], [r.dec for r in rows]).reshape(-1, 3)
            ep = np.fromiter((r.epoch for r in rows), dtype=np.float64, count=len(rows))
            cached = self._arrays = (vec, ep)
        return cached

    def encode(self) -> Iterator[bytes]:
        yield struct.pack("<QQ", len(self.rows), len(self.object_rows))
        for r in self.rows:
            yield encode_source(r)
        for oid in sorted(self.object_rows):
            yield encode_object(self.object_rows[oid])

    def checksum(self) -> str:
        return content_hash(self.encode())

    def export_ndjson(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.rows)


class ConeEpochPredicate:
    """Rows inside a cone (inclusive) and a closed epoch range."""

    def __init__(self, cone: ConeQuery | None = None, epoch_range: tuple[float, float] | None = None):
        self.cone = cone
        self.epoch_range = epoch_range
        if cone is not None:
            self._center = np.array(cone.center)
            self._cos = math.cos(math.radians(cone.radius))

    def __call__(self, r: SourceRecord) -> bool:
        if self.epoch_range is not None and not self.epoch_range[0] <= r.epoch <= self.epoch_range[1]:
            return False
        return self.cone is None or self.cone.radius >= 180.0 or self.cone.contains(r.ra, r.dec)

    def mask(self, part: Partition) -> np.ndarray:
        vec, ep = part.arrays()
        m = np.ones(len(ep), dtype=bool)
        if self.epoch_range is not None:
            m &= (ep >= self.epoch_range[0]) & (ep <= self.epoch_range[1])
        if self.cone is not None and self.cone.radius < 180.0:
            m &= vec @ self._center >= self._cos
        return m


def scan(partition: Partition, predicate: Callable[[SourceRecord], bool] | None = None) -> Iterator[SourceRecord]:
    """Rows of ``partition`` satisfying ``predicate``, in clustering order."""
    rows = partition.rows
    if predicate is None:
        yield from list(rows)
    elif hasattr(predicate, "mask"):
        m = predicate.mask(partition)
        for i in np.flatnonzero(m):
            yield rows[i]
    else:
        for r in list(rows):
            if predicate(r):
                yield r


class CatalogStore(LockState):
    _lock_factories = {"gate": RWLock, "_meta_lock": threading.RLock}

    def __init__(self, cfg: IndexConfig | None = None):
        self.cfg = cfg or IndexConfig()
        self.partitions: dict[PartitionKey, Partition] = {}
        self.snapshots: dict[str, dict[PartitionKey, str]] = {}
        self.index_chunks: dict[TrixelId, IndexChunk] = {}
        # live object state ("latest" pool) and its spatial index
        self.objects: dict[int, AstroObject] = {}
        self.object_home: dict[int, PartitionKey] = {}
        self.home_objects: dict[PartitionKey, set[int]] = defaultdict(set)
        self.object_cells: dict[int, set[int]] = defaultdict(set)
        self._object_cell: dict[int, int] = {}
        self._next_object_id = 1
        self.gate = RWLock()
        self._meta_lock = threading.RLock()

    # -- partitions ----------------------------------------------------------

    def create_partition(self, key: PartitionKey) -> Partition:
        if key.trixel.level != self.cfg.partition_level:
            raise ValueError(f"key {key} is not at partition level {self.cfg.partition_level}")
        with self._meta_lock:
            if key in self.partitions:
                raise DuplicatePartition(f"partition {key} already exists")
            part = self.partitions[key] = Partition(key, self.cfg)
            return part

    def get(self, key: PartitionKey) -> Partition:
        try:
            return self.partitions[key]
        except KeyError:
            raise UnknownPartition(f"no partition {key}") from None

    def ensure_partition(self, key: PartitionKey) -> Partition:
        with self._meta_lock:
            part = self.partitions.get(key)
            return part if part is not None else self.create_partition(key)

    def keys(self) -> list[PartitionKey]:
        return sorted(self.partitions)

    def key_for(self, ra: float, dec: float, epoch: float) -> PartitionKey:
        return PartitionKey(trixel_of(ra, dec, self.cfg.partition_level), time_bucket(epoch, self.cfg.bucket_width))

    def keys_for(self, records: list[SourceRecord], htm_ids=None) -> list[PartitionKey]:
        if htm_ids is None:
            htm_ids = trixel_ids([r.ra for r in records], [r.dec for r in records], self.cfg.max_level)
        shift = 2 * (self.cfg.max_level - self.cfg.partition_level)
        lvl = self.cfg.partition_level
        w = self.cfg.bucket_width
        return [
            PartitionKey(TrixelId(int(h) >> shift, lvl), time_bucket(r.epoch, w))
            for h, r in zip(htm_ids, records)
        ]

    def insert_clustered(self, partition: Partition | PartitionKey, records: list[SourceRecord], htm_ids=None) -> int:
        part = partition if isinstance(partition, Partition) else self.get(partition)
        if htm_ids is None and records:
            htm_ids = trixel_ids([r.ra for r in records], [r.dec for r in records], self.cfg.max_level)
        with self.gate.shared():
            n = part.insert(records, htm_ids)
            if n:
                self._index(part.key, records, htm_ids)
        return n

    def load(self, records: list[SourceRecord]) -> int:
        """Route records to their partitions (created on demand) and insert them."""
        if not records:
            return 0
        htm = trixel_ids([r.ra for r in records], [r.dec for r in records], self.cfg.max_level)
        groups: dict[PartitionKey, list[int]] = defaultdict(list)
        for i, key in enumerate(self.keys_for(records, htm)):
            groups[key].append(i)
        n = 0
        for key in sorted(groups):
            idx = groups[key]
            n += self.insert_clustered(self.ensure_partition(key), [records[i] for i in idx], htm[idx])
        return n

    def _index(self, key: PartitionKey, records, htm_ids) -> None:
        shift = 2 * (self.cfg.max_level - self.cfg.partition_level)
        with self._meta_lock:
            for h, r in zip(htm_ids, records):
                h = int(h)
                prefix = TrixelId(h >> shift, self.cfg.partition_level)
                chunk = self.index_chunks.get(prefix)
                if chunk is None:
                    chunk = self.index_chunks[prefix] = IndexChunk(prefix, self.cfg.max_level)
                chunk.add(h, key, r.locator)

    def locate(self, htm_id: int) -> list[tuple[PartitionKey, tuple]]:
        """Partition and row locators indexed under a max-level trixel."""
        shift = 2 * (self.cfg.max_level - self.cfg.partition_level)
        chunk = self.index_chunks.get(TrixelId(htm_id >> shift, self.cfg.partition_level))
        return chunk.lookup(htm_id) if chunk else []

    def scan(self, partition: Partition | PartitionKey, predicate=None) -> Iterator[SourceRecord]:
        part = partition if isinstance(partition, Partition) else self.get(partition)
        return scan(part, predicate)

    @property
    def total_rows(self) -> int:
        return sum(p.row_count for p in self.partitions.values())

    def all_rows(self) -> list[SourceRecord]:
        return [r for k in self.keys() for r in self.partitions[k].rows]

    def export_ndjson(self, key: PartitionKey) -> str:
        return self.get(key).export_ndjson()

    # -- snapshots -----------------------------------------------------------

    def snapshot(self, keys: Iterable[PartitionKey]) -> tuple[str, dict[PartitionKey, str]]:
        keys = sorted(set(keys))
        with self.gate.exclusive():
            parts = [self.get(k) for k in keys]
            frozen = [p.key for p in parts if p.frozen]
            if frozen:
                raise AlreadyFrozen(f"partitions already frozen: {', '.join(map(str, frozen))}")
            sums = {}
            for p in parts:
                p.set_objects({oid: self.objects[oid] for oid in self.home_objects.get(p.key, ())})
                with p.lock:
                    p.state = FROZEN
                    p.frozen_checksum = p.checksum()
                sums[p.key] = p.frozen_checksum
            with self._meta_lock:
                sid = f"snap-{len(self.snapshots) + 1:04d}"
                self.snapshots[sid] = sums
        return sid, sums

    def checksum(self, key: PartitionKey) -> str:
        return self.get(key).checksum()

    # -- objects -------------------------------------------------------------

    def new_object_id(self) -> int:
        with self._meta_lock:
            oid = self._next_object_id
            self._next_object_id += 1
            return oid

    def _cell_of(self, obj: AstroObject) -> int:
        lvl = self.cfg.max_level
        old = self._object_cell.get(obj.object_id)
        if old is not None and contains_point(TrixelId(old, lvl), obj.ra, obj.dec, 0.0):
            return old
        return trixel_of(obj.ra, obj.dec, lvl).id

    def upsert_object(self, obj: AstroObject, home: PartitionKey | None = None) -> None:
        """Record the latest state of an object and keep its home partition in sync."""
        cell = self._cell_of(obj)
        with self._meta_lock:
            oid = obj.object_id
            self.objects[oid] = obj
            if oid not in self.object_home:
                self.object_home[oid] = home or self.key_for(obj.ra, obj.dec, obj.first_epoch)
                self.home_objects[self.object_home[oid]].add(oid)
            old = self._object_cell.get(oid)
            if old != cell:
                if old is not None:
                    self.object_cells[old].discard(oid)
                self.object_cells[cell].add(oid)
                self._object_cell[oid] = cell
            part = self.partitions.get(self.object_home[oid])
        if part is not None and not part.frozen:
            with part.lock:
                if not part.frozen:
                    part.object_rows[oid] = obj

    def sync_object_rows(self, key: PartitionKey) -> None:
        part = self.get(key)
        if not part.frozen:
            part.set_objects({oid: self.objects[oid] for oid in self.home_objects.get(key, ())})

    def objects_near(self, ra: float, dec: float, radius: float, htm_id: int | None = None) -> list[AstroObject]:
        """Objects whose cell may lie within ``radius`` degrees of (ra, dec)."""
        lvl = self.cfg.max_level
        if htm_id is None:
            htm_id = trixel_of(ra, dec, lvl).id
        tid = TrixelId(htm_id, lvl)
        if min_edge_distance(ra, dec, tid) > radius:
            cells = [htm_id]
        else:
            cells = [t.id for t in expand_to_level(cone_cover(ConeQuery(ra, dec, radius), lvl), lvl)]
        out = []
        for c in cells:
            for oid in self.object_cells.get(c, ()):
                out.append(self.objects[oid])
        return out
