"""Query planning and execution across partitions, replicas and data pools."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .balancer import Topology
from .catalog import AstroObject, CatalogStore, ConeEpochPredicate, SourceRecord, scan, sort_key
from .errors import UnknownObject, UnknownRelease
from .htm import ConeQuery, PartitionKey, partitions_for, trixel_ids
from .ingest import IngestService
from .versions import ReleaseManager, VersionStore

LATEST = "latest"
LOCAL = "local"  # partition not under replica management; served by the store itself


@dataclass
class Query:
    cone: ConeQuery | None = None
    epoch_range: tuple[float, float] | None = None
    object_id: int | None = None
    pool: str = LATEST
    farm_hint: str | None = None
    # Fold not-yet-merged ingest rows into a latest-pool answer.
    include_staging: bool = False

    def __post_init__(self):
        if self.cone is None and self.epoch_range is None and self.object_id is None:
            raise ValueError("a query needs a cone, an epoch range or an object id")
        if self.pool != LATEST and not self.pool.startswith("released:"):
            raise ValueError(f"pool must be 'latest' or 'released:<id>', got {self.pool!r}")
        if self.include_staging and self.pool != LATEST:
            raise ValueError("staging rows only exist in the latest pool")

    @property
    def release_id(self) -> str | None:
        return self.pool.split(":", 1)[1] if self.pool.startswith("released:") else None

    @classmethod
    def from_dict(cls, doc: dict) -> "Query":
        cone = doc.get("cone")
        if isinstance(cone, dict):
            cone = ConeQuery(float(cone["ra"]), float(cone["dec"]), float(cone["radius"]))
        elif cone is not None:
            cone = ConeQuery(*(float(x) for x in cone))
        epochs = doc.get("epoch_range") or doc.get("epoch")
        return cls(
            cone=cone,
            epoch_range=tuple(float(x) for x in epochs) if epochs is not None else None,
            object_id=doc.get("object_id"),
            pool=doc.get("pool", LATEST),
            farm_hint=doc.get("farm_hint"),
            include_staging=bool(doc.get("include_staging", False)),
        )

    def to_dict(self) -> dict:
        return {
            "cone": None if self.cone is None else
            {"ra": self.cone.center_ra, "dec": self.cone.center_dec, "radius": self.cone.radius},
            "epoch_range": None if self.epoch_range is None else list(self.epoch_range),
            "object_id": self.object_id,
            "pool": self.pool,
            "farm_hint": self.farm_hint,
            "include_staging": self.include_staging,
        }


@dataclass
class QueryPlan:
    query: Query
    targets: list[PartitionKey]
    replicas: dict[PartitionKey, str]
    pool: str
    estimated_rows: int
    topology_version: int = 0


@dataclass
class QueryResult:
    plan: QueryPlan
    rows: list[SourceRecord] = field(default_factory=list)
    objects: list[AstroObject] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def to_ndjson(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.rows) + "".join(o.to_json() + "\n" for o in self.objects)


class Router:
    def __init__(
        self,
        store: CatalogStore,
        topology: Topology | None = None,
        releases: ReleaseManager | None = None,
        versions: VersionStore | None = None,
        ingest: IngestService | None = None,
        max_workers: int = 4,
    ):
        self.store = store
        self.topology = topology or Topology(store)
        self.releases = releases
        self.versions = versions
        self.ingest = ingest
        self.max_workers = max_workers

    def _route(self, key: PartitionKey, farm: str | None) -> str:
        if not self.topology.managed(key):
            return LOCAL
        return self.topology.route(key, farm=farm)

    def _object(self, query: Query) -> tuple[AstroObject, PartitionKey]:
        oid = query.object_id
        home = self.store.object_home.get(oid)
        if home is None:
            raise UnknownObject(f"no object {oid}")
        if query.release_id is not None:
            if self.versions is None:
                raise UnknownObject(f"no version history for object {oid}")
            v = self.versions.read_versioned(oid, f"release:{query.release_id}", self.releases)
            return v.payload, home
        return self.store.objects[oid], home

    def plan(self, query: Query) -> QueryPlan:
        cfg = self.store.cfg
        if query.release_id is not None:
            if self.releases is None:
                raise UnknownRelease(query.release_id)
            existing = self.releases.get(query.release_id).keys
        else:
            existing = self.store.keys()
        if query.object_id is not None:
            _, home = self._object(query)
            keys = {home} & set(existing)
        else:
            keys = partitions_for(query.cone, query.epoch_range, cfg, existing)
        targets = sorted(keys)
        replicas = {k: self._route(k, query.farm_hint) for k in targets}
        est = sum(self.store.get(k).row_count for k in targets)
        return QueryPlan(query, targets, replicas, query.pool, est, self.topology.version)

    def _scan_one(self, plan: QueryPlan, key: PartitionKey, predicate) -> tuple[list[SourceRecord], float]:
        t0 = time.perf_counter()
        node = plan.replicas[key]
        if node != LOCAL and not self.topology.alive(node):
            # one replan attempt, then give up
            node = plan.replicas[key] = self.topology.route(key, farm=plan.query.farm_hint)
        if node != LOCAL:
            self.topology.record_access(key, node)
        rows = list(scan(self.store.get(key), predicate))
        return rows, time.perf_counter() - t0

    def execute(self, plan: QueryPlan) -> QueryResult:
        q = plan.query
        result = QueryResult(plan)
        if q.object_id is not None:
            obj, _ = self._object(q)
            for key in plan.targets:
                node = plan.replicas[key]
                if node != LOCAL:
                    if not self.topology.alive(node):
                        node = plan.replicas[key] = self.topology.route(key, farm=q.farm_hint)
                    self.topology.record_access(key, node)
            result.objects.append(obj)
            return result
        predicate = ConeEpochPredicate(q.cone, q.epoch_range)
        if len(plan.targets) > 1 and self.max_workers > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                parts = list(pool.map(lambda k: self._scan_one(plan, k, predicate), plan.targets))
        else:
            parts = [self._scan_one(plan, k, predicate) for k in plan.targets]
        for key, (rows, dt) in zip(plan.targets, parts):
            result.rows.extend(rows)
            result.timings[str(key)] = dt
        if q.include_staging and self.ingest is not None:
            result.rows = self._with_staging(result.rows, predicate)
        return result

    def _with_staging(self, rows: list[SourceRecord], predicate) -> list[SourceRecord]:
        """Union with matching ingest rows, re-sorted into the normative order."""
        cfg = self.store.cfg
        merged = []
        if rows:
            htm = trixel_ids([r.ra for r in rows], [r.dec for r in rows], cfg.max_level)
            keys = self.store.keys_for(rows, htm)
            merged.extend(((k, sort_key(int(h), r)), r) for k, h, r in zip(keys, htm, rows))
        staged = [(r, h) for _, _, _, r, h in self.ingest.night_rows() if predicate(r)]
        if staged:
            keys = self.store.keys_for([r for r, _ in staged], [h for _, h in staged])
            merged.extend(((k, sort_key(h, r)), r) for k, (r, h) in zip(keys, staged))
        merged.sort(key=lambda kr: kr[0])
        return [r for _, r in merged]

    def query(self, query: Query) -> QueryResult:
        return self.execute(self.plan(query))
