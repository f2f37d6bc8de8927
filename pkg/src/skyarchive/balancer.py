"""Simulated tiered node registry: heat tracking, hot spots, rebalancing, failures."""

from __future__ import annotations

import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable

from ._sync import LockState
from .catalog import CatalogStore
from .errors import NoCapacity, NotHosted, SourceMissing, UnavailablePartition, UnknownNode
from .htm import PartitionKey

TIERS = ("base", "archive", "dac", "enduser")

DEFAULT_WINDOW = 60.0
DEFAULT_HOT_FACTOR = 3.0


@dataclass
class NodeDescriptor:
    node_id: str
    tier: str
    farm: str = "default"
    capacity: int = 64
    replicas: dict[PartitionKey, str] = field(default_factory=dict)  # key -> checksum
    alive: bool = True

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")

    @property
    def hosted(self) -> set[PartitionKey]:
        return set(self.replicas)

    @property
    def spare(self) -> int:
        return self.capacity - len(self.replicas)

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "tier": self.tier,
            "farm": self.farm,
            "capacity": self.capacity,
            "alive": self.alive,
            "hosted": sorted(str(k) for k in self.replicas),
        }


class HeatMap(LockState):
    """Per (partition, node) access counters over a sliding window."""

    _lock_factories = {"_lock": threading.Lock}

    def __init__(self, window: float = DEFAULT_WINDOW, clock: Callable[[], float] = time.monotonic):
        if window <= 0:
            raise ValueError("window must be positive")
        self.window = window
        self.clock = clock
        self.window_index = 0
        self.counters: Counter = Counter()
        self.archived: list[tuple[int, dict]] = []
        self._lock = threading.Lock()

    def __getstate__(self):
        state = super().__getstate__()
        state["clock"] = None
        return state

    def __setstate__(self, state):
        super().__setstate__(state)
        self.clock = time.monotonic

    def _roll(self) -> None:
        idx = int(self.clock() // self.window)
        if idx != self.window_index:
            if self.counters:
                self.archived.append((self.window_index, dict(self.counters)))
            self.counters = Counter()
            self.window_index = idx

    def record(self, key: PartitionKey, node_id: str) -> int:
        with self._lock:
            self._roll()
            self.counters[(key, node_id)] += 1
            return self.counters[(key, node_id)]

    def current(self) -> Counter:
        with self._lock:
            self._roll()
            return Counter(self.counters)

    def heat(self, key: PartitionKey) -> int:
        return sum(v for (k, _), v in self.current().items() if k == key)

    def by_partition(self) -> Counter:
        out = Counter()
        for (k, _), v in self.current().items():
            out[k] += v
        return out

    def by_node(self) -> Counter:
        out = Counter()
        for (_, n), v in self.current().items():
            out[n] += v
        return out


@dataclass(frozen=True)
class RebalanceAction:
    kind: str  # "add" or "move"
    key: PartitionKey
    source: str
    target: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "key": str(self.key), "source": self.source, "target": self.target}


@dataclass
class RebalancePlan:
    hotspots: list[PartitionKey] = field(default_factory=list)
    actions: list[RebalanceAction] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "hotspots": [str(k) for k in self.hotspots],
            "actions": [a.to_dict() for a in self.actions],
            "notes": list(self.notes),
        }


class Topology(LockState):
    _lock_factories = {"_lock": threading.RLock}

    def __init__(self, store: CatalogStore | None = None, heat: HeatMap | None = None):
        self.store = store
        self.nodes: dict[str, NodeDescriptor] = {}
        self.heat = heat or HeatMap()
        self.version = 0
        self._rr: Counter = Counter()
        self._lock = threading.RLock()

    # -- registry ------------------------------------------------------------

    def add_node(self, node_id: str, tier: str, farm: str = "default", capacity: int = 64) -> NodeDescriptor:
        with self._lock:
            if node_id in self.nodes:
                raise ValueError(f"node {node_id} already registered")
            node = self.nodes[node_id] = NodeDescriptor(node_id, tier, farm, capacity)
            self.version += 1
            return node

    def node(self, node_id: str) -> NodeDescriptor:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"no node {node_id!r}") from None

    def _checksum(self, key: PartitionKey) -> str:
        if self.store is not None and key in self.store.partitions:
            return self.store.checksum(key)
        return ""

    def host(self, key: PartitionKey, node_id: str, checksum: str | None = None) -> None:
        with self._lock:
            node = self.node(node_id)
            if key not in node.replicas and node.spare <= 0:
                raise NoCapacity(f"node {node_id} is full")
            node.replicas[key] = self._checksum(key) if checksum is None else checksum
            self.version += 1

    def replicas(self, key: PartitionKey, alive_only: bool = True) -> list[str]:
        return sorted(
            n.node_id for n in self.nodes.values() if key in n.replicas and (n.alive or not alive_only)
        )

    def managed(self, key: PartitionKey) -> bool:
        return any(key in n.replicas for n in self.nodes.values())

    def hosted_keys(self) -> set[PartitionKey]:
        return {k for n in self.nodes.values() for k in n.replicas}

    def fail_node(self, node_id: str) -> None:
        with self._lock:
            self.node(node_id).alive = False
            self.version += 1

    def recover_node(self, node_id: str) -> None:
        with self._lock:
            self.node(node_id).alive = True
            self.version += 1

    def alive(self, node_id: str) -> bool:
        return self.node(node_id).alive

    def sync_checksums(self) -> None:
        """Refresh replica checksums of live partitions after new data lands."""
        if self.store is None:
            return
        with self._lock:
            for n in self.nodes.values():
                for k in n.replicas:
                    if k in self.store.partitions:
                        n.replicas[k] = self.store.checksum(k)

    # -- heat ----------------------------------------------------------------

    def record_access(self, key: PartitionKey, node_id: str) -> int:
        node = self.node(node_id)
        if key not in node.replicas:
            raise NotHosted(f"node {node_id} does not host {key}")
        return self.heat.record(key, node_id)

    def detect_hotspots(self, threshold_factor: float = DEFAULT_HOT_FACTOR) -> list[PartitionKey]:
        if threshold_factor <= 1:
            raise ValueError("threshold_factor must exceed 1")
        hosted = self.hosted_keys()
        if not hosted:
            return []
        heat = self.heat.by_partition()
        mean = sum(heat[k] for k in hosted) / len(hosted)
        if mean == 0:
            return []
        return sorted(k for k in hosted if heat[k] > threshold_factor * mean)

    # -- routing -------------------------------------------------------------

    def route(self, key: PartitionKey, farm: str | None = None, load: Counter | None = None, policy: str = "least_loaded") -> str:
        """Pick an alive replica; a farm hint narrows the choice when it can."""
        candidates = [self.nodes[n] for n in self.replicas(key)]
        if farm is not None:
            in_farm = [n for n in candidates if n.farm == farm]
            candidates = in_farm or candidates
        if not candidates:
            raise UnavailablePartition(key)
        if policy == "round_robin":
            with self._lock:
                i = self._rr[key]
                self._rr[key] += 1
            return candidates[i % len(candidates)].node_id
        load = self.heat.by_node() if load is None else load
        return min(candidates, key=lambda n: (load[n.node_id], n.node_id)).node_id

    # -- rebalancing ---------------------------------------------------------

    def plan_rebalance(self, hotspots: Iterable[PartitionKey]) -> RebalancePlan:
        hot = sorted(set(hotspots))
        plan = RebalancePlan(hotspots=hot)
        if not hot:
            return plan
        with self._lock:
            load = self.heat.by_node()
            heat = self.heat.by_partition()
            used = Counter({n.node_id: len(n.replicas) for n in self.nodes.values()})
            planned: dict[str, set] = defaultdict(set)
            freed: dict[str, set] = defaultdict(set)

            def holds(n: NodeDescriptor, k) -> bool:
                return (k in n.replicas and k not in freed[n.node_id]) or k in planned[n.node_id]

            for key in hot:
                holders = [self.nodes[n] for n in self.replicas(key)]
                if not holders:
                    plan.notes.append(f"{key}: no alive replica to copy from")
                    continue
                source = min(holders, key=lambda n: (load[n.node_id], n.node_id))
                farms = {n.farm for n in holders}
                pool = [n for n in self.nodes.values() if n.alive and n.farm in farms and not holds(n, key)]
                room = [n for n in pool if used[n.node_id] < n.capacity]
                if room:
                    target = min(room, key=lambda n: (load[n.node_id], used[n.node_id], n.node_id))
                    plan.actions.append(RebalanceAction("add", key, source.node_id, target.node_id))
                    used[target.node_id] += 1
                    planned[target.node_id].add(key)
                    continue
                made_room = False
                for full in sorted(pool, key=lambda n: (load[n.node_id], n.node_id)):
                    cold = sorted(
                        (k for k in full.replicas if k not in hot and k not in freed[full.node_id]),
                        key=lambda k: (heat[k], k),
                    )
                    for ck in cold:
                        dest = [
                            n for n in self.nodes.values()
                            if n.alive and n.node_id != full.node_id and not holds(n, ck)
                            and used[n.node_id] < n.capacity
                        ]
                        if not dest:
                            continue
                        d = min(dest, key=lambda n: (load[n.node_id], used[n.node_id], n.node_id))
                        plan.actions.append(RebalanceAction("move", ck, full.node_id, d.node_id))
                        plan.actions.append(RebalanceAction("add", key, source.node_id, full.node_id))
                        used[d.node_id] += 1
                        planned[d.node_id].add(ck)
                        freed[full.node_id].add(ck)
                        planned[full.node_id].add(key)
                        made_room = True
                        break
                    if made_room:
                        break
                if not made_room:
                    plan.notes.append(f"{key}: NoCapacity, no alive node in farm(s) {sorted(farms)} has room")
        return plan

    def apply_rebalance(self, plan: RebalancePlan) -> list[RebalanceAction]:
        applied = []
        with self._lock:
            for a in plan.actions:
                src = self.nodes.get(a.source)
                dst = self.nodes.get(a.target)
                if src is None or dst is None or not src.alive or not dst.alive or a.key not in src.replicas:
                    continue
                if a.key in dst.replicas:
                    continue
                if dst.spare <= 0:
                    continue
                checksum = self._checksum(a.key) or src.replicas[a.key]
                dst.replicas[a.key] = checksum
                if a.kind == "move":
                    del src.replicas[a.key]
                applied.append(a)
            if applied:
                self.version += 1
        return applied

    def rebalance(self, threshold_factor: float = DEFAULT_HOT_FACTOR) -> RebalancePlan:
        plan = self.plan_rebalance(self.detect_hotspots(threshold_factor))
        self.apply_rebalance(plan)
        return plan

    def replicate_to_tier(self, keys: Iterable[PartitionKey], from_tier: str, to_tier: str) -> list[tuple[PartitionKey, str]]:
        placed = []
        with self._lock:
            for key in sorted(set(keys)):
                sources = [
                    n for n in self.nodes.values()
                    if n.tier == from_tier and n.alive and key in n.replicas
                ]
                if not sources:
                    raise SourceMissing(f"no alive {from_tier} node holds {key}")
                if any(n.tier == to_tier and key in n.replicas for n in self.nodes.values()):
                    continue
                targets = [n for n in self.nodes.values() if n.tier == to_tier and n.alive and n.spare > 0]
                if not targets:
                    raise NoCapacity(f"no {to_tier} node has room for {key}")
                t = min(targets, key=lambda n: (len(n.replicas), n.node_id))
                t.replicas[key] = sources[0].replicas[key]
                placed.append((key, t.node_id))
            self.version += 1
        return placed

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "nodes": [n.to_dict() for _, n in sorted(self.nodes.items())],
        }


def replay(topology: Topology, trace: Iterable[PartitionKey], policy: str = "least_loaded", farm: str | None = None) -> Counter:
    """Route a trace of partition accesses and return the per-node load."""
    load: Counter = Counter()
    for key in trace:
        node = topology.route(key, farm=farm, load=load, policy=policy)
        load[node] += 1
    return load
