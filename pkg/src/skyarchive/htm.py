"""Hierarchical triangular sky index and time bucketing.

The sphere is split into the 8 faces of an octahedron (N0..N3 north of the
equator, S0..S3 south, each spanning one 90 degree RA quadrant) and every
face is recursively divided into 4 children through normalized edge
midpoints. A trixel id packs the root index (3 bits) followed by 2 bits per
level; the level is carried alongside the integer since the packing alone
does not encode it.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import InvalidCoordinates

DEFAULT_PARTITION_LEVEL = 3
DEFAULT_MAX_LEVEL = 10
DEFAULT_BUCKET_WIDTH = 86400.0

# Slack applied to every half-space test, in radians of arc.
EDGE_EPS = 1e-12

_EQUATOR = [
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (-1.0, 0.0, 0.0),
    (0.0, -1.0, 0.0),
]
_NORTH = (0.0, 0.0, 1.0)
_SOUTH = (0.0, 0.0, -1.0)

# Counter-clockwise (seen from outside) vertex triples for roots 0..7.
ROOT_VERTICES: tuple[tuple[tuple[float, float, float], ...], ...] = tuple(
    [(_EQUATOR[k], _EQUATOR[(k + 1) % 4], _NORTH) for k in range(4)]
    + [(_EQUATOR[(k + 1) % 4], _EQUATOR[k], _SOUTH) for k in range(4)]
)
ROOT_NAMES = ("N0", "N1", "N2", "N3", "S0", "S1", "S2", "S3")

_ROOT_ARRAY = np.array(ROOT_VERTICES, dtype=np.float64)  # (8, 3, 3)


@dataclass(frozen=True, order=True)
class TrixelId:
    id: int
    level: int

    def __post_init__(self):
        if self.level < 0 or not 0 <= self.id < 8 << (2 * self.level):
            raise ValueError(f"invalid trixel ({self.id}, level {self.level})")

    @property
    def root(self) -> int:
        return self.id >> (2 * self.level)

    def ancestor(self, level: int) -> "TrixelId":
        if level > self.level:
            raise ValueError("ancestor level deeper than trixel")
        return TrixelId(self.id >> (2 * (self.level - level)), level)

    def is_ancestor_of(self, other: "TrixelId") -> bool:
        return other.level >= self.level and other.ancestor(self.level) == self

    def children(self) -> list["TrixelId"]:
        return [TrixelId((self.id << 2) | c, self.level + 1) for c in range(4)]

    def descendants(self, level: int) -> Iterator["TrixelId"]:
        shift = 2 * (level - self.level)
        if shift < 0:
            raise ValueError("descendant level shallower than trixel")
        base = self.id << shift
        for k in range(1 << shift):
            yield TrixelId(base | k, level)

    def digits(self) -> list[int]:
        return [(self.id >> (2 * (self.level - 1 - i))) & 3 for i in range(self.level)]

    def __str__(self) -> str:
        return ROOT_NAMES[self.root] + "".join(str(d) for d in self.digits())

    @classmethod
    def parse(cls, text: str) -> "TrixelId":
        text = text.strip()
        if len(text) < 2 or text[:2] not in ROOT_NAMES or any(c not in "0123" for c in text[2:]):
            raise ValueError(f"malformed trixel name {text!r}")
        tid = ROOT_NAMES.index(text[:2])
        for c in text[2:]:
            tid = (tid << 2) | int(c)
        return cls(tid, len(text) - 2)


@dataclass(frozen=True, order=True)
class PartitionKey:
    """(spatial trixel prefix, time bucket) address of a catalog partition."""

    trixel: TrixelId
    bucket: int

    def __str__(self) -> str:
        return f"{self.trixel}:{self.bucket}"

    @classmethod
    def parse(cls, text: str) -> "PartitionKey":
        name, _, bucket = text.partition(":")
        if not bucket:
            raise ValueError(f"malformed partition key {text!r}")
        return cls(TrixelId.parse(name), int(bucket))


@dataclass(frozen=True)
class IndexConfig:
    partition_level: int = DEFAULT_PARTITION_LEVEL
    max_level: int = DEFAULT_MAX_LEVEL
    bucket_width: float = DEFAULT_BUCKET_WIDTH
    # Only "spatial" ships; the field documents the choice.
    clustering: str = "spatial"

    def __post_init__(self):
        if not 0 <= self.partition_level <= self.max_level:
            raise ValueError("partition_level must lie in [0, max_level]")
        if self.max_level > 28:
            raise ValueError("max_level above 28 does not fit in 64 bits")
        if self.bucket_width <= 0:
            raise ValueError("bucket_width must be positive")
        if self.clustering != "spatial":
            raise ValueError("only spatial-primary clustering is implemented")


@dataclass(frozen=True)
class ConeQuery:
    center_ra: float
    center_dec: float
    radius: float

    def __post_init__(self):
        check_coordinates(self.center_ra, self.center_dec)
        if not 0.0 < self.radius <= 180.0:
            raise InvalidCoordinates(f"cone radius {self.radius} outside (0, 180]")

    @property
    def center(self) -> tuple[float, float, float]:
        return radec_to_vector(self.center_ra, self.center_dec)

    def contains(self, ra: float, dec: float) -> bool:
        x, y, z = radec_to_vector(ra, dec)
        cx, cy, cz = self.center
        return x * cx + y * cy + z * cz >= math.cos(math.radians(self.radius))


def check_coordinates(ra: float, dec: float) -> None:
    if not (math.isfinite(ra) and math.isfinite(dec)):
        raise InvalidCoordinates(f"non-finite coordinates ({ra}, {dec})")
    if not 0.0 <= ra < 360.0:
        raise InvalidCoordinates(f"ra {ra} outside [0, 360)")
    if not -90.0 <= dec <= 90.0:
        raise InvalidCoordinates(f"dec {dec} outside [-90, 90]")


def radec_to_vector(ra: float, dec: float) -> tuple[float, float, float]:
    a = math.radians(ra)
    d = math.radians(dec)
    cd = math.cos(d)
    return (cd * math.cos(a), cd * math.sin(a), math.sin(d))


def radec_to_vectors(ra: np.ndarray, dec: np.ndarray) -> np.ndarray:
    a = np.radians(np.asarray(ra, dtype=np.float64))
    d = np.radians(np.asarray(dec, dtype=np.float64))
    cd = np.cos(d)
    return np.stack([cd * np.cos(a), cd * np.sin(a), np.sin(d)], axis=-1)


def angular_separation(ra1, dec1, ra2, dec2):
    """Great-circle distance in degrees (Vincenty form, stable at small angles)."""
    ra1, dec1, ra2, dec2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (ra1, dec1, ra2, dec2))
    dra = ra2 - ra1
    s1, c1 = np.sin(dec1), np.cos(dec1)
    s2, c2 = np.sin(dec2), np.cos(dec2)
    num = np.hypot(c2 * np.sin(dra), c1 * s2 - s1 * c2 * np.cos(dra))
    den = s1 * s2 + c1 * c2 * np.cos(dra)
    out = np.degrees(np.arctan2(num, den))
    return float(out) if out.ndim == 0 else out


def separation(ra1: float, dec1: float, ra2: float, dec2: float) -> float:
    """Scalar great-circle distance in degrees."""
    r1, d1, r2, d2 = math.radians(ra1), math.radians(dec1), math.radians(ra2), math.radians(dec2)
    dra = r2 - r1
    s1, c1, s2, c2 = math.sin(d1), math.cos(d1), math.sin(d2), math.cos(d2)
    cdra = math.cos(dra)
    num = math.hypot(c2 * math.sin(dra), c1 * s2 - s1 * c2 * cdra)
    return math.degrees(math.atan2(num, s1 * s2 + c1 * c2 * cdra))


# -- trixel assignment -------------------------------------------------------


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _root_index(ra: np.ndarray, dec: np.ndarray) -> np.ndarray:
    quadrant = np.minimum((ra // 90.0).astype(np.int64), 3)
    return quadrant + np.where(dec < 0.0, 4, 0)


# Below this many points the pure-Python descent beats numpy call overhead.
SMALL_BATCH = 8


def _trixel_id_scalar(ra: float, dec: float, level: int) -> int:
    p = radec_to_vector(ra, dec)
    tid = min(int(ra // 90.0), 3) + (4 if dec < 0.0 else 0)
    v0, v1, v2 = ROOT_VERTICES[tid]
    for _ in range(level):
        w0 = _mid(v1, v2)
        w1 = _mid(v0, v2)
        w2 = _mid(v0, v1)
        if _dot(_unit(_cross(w2, w1)), p) >= -EDGE_EPS:
            child, v0, v1, v2 = 0, v0, w2, w1
        elif _dot(_unit(_cross(w0, w2)), p) >= -EDGE_EPS:
            child, v0, v1, v2 = 1, v1, w0, w2
        elif _dot(_unit(_cross(w1, w0)), p) >= -EDGE_EPS:
            child, v0, v1, v2 = 2, v2, w1, w0
        else:
            child, v0, v1, v2 = 3, w0, w1, w2
        tid = (tid << 2) | child
    return tid


def trixel_ids(ra, dec, level: int) -> np.ndarray:
    """Vectorized packed trixel ids at ``level`` for coordinate arrays."""
    if level < 0:
        raise ValueError("level must be non-negative")
    if isinstance(ra, (list, tuple)) and len(ra) <= SMALL_BATCH:
        for a, d in zip(ra, dec):
            check_coordinates(a, d)
        return np.array([_trixel_id_scalar(a, d, level) for a, d in zip(ra, dec)], dtype=np.int64)
    ra = np.atleast_1d(np.asarray(ra, dtype=np.float64))
    dec = np.atleast_1d(np.asarray(dec, dtype=np.float64))
    if ra.size and (
        not np.all(np.isfinite(ra)) or not np.all(np.isfinite(dec))
        or ra.min() < 0.0 or ra.max() >= 360.0 or dec.min() < -90.0 or dec.max() > 90.0
    ):
        raise InvalidCoordinates("coordinates out of range")
    p = radec_to_vectors(ra, dec)
    ids = _root_index(ra, dec)
    tri = _ROOT_ARRAY[ids]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    for _ in range(level):
        w0 = _normalize(v1 + v2)
        w1 = _normalize(v0 + v2)
        w2 = _normalize(v0 + v1)
        # Interior edges of children 0..2; child 3 is what remains.
        in0 = np.einsum("ij,ij->i", _normalize(np.cross(w2, w1)), p) >= -EDGE_EPS
        in1 = np.einsum("ij,ij->i", _normalize(np.cross(w0, w2)), p) >= -EDGE_EPS
        in2 = np.einsum("ij,ij->i", _normalize(np.cross(w1, w0)), p) >= -EDGE_EPS
        child = np.where(in0, 0, np.where(in1, 1, np.where(in2, 2, 3)))
        c0 = (child == 0)[:, None]
        c1 = (child == 1)[:, None]
        c2 = (child == 2)[:, None]
        n0 = np.where(c0, v0, np.where(c1, v1, np.where(c2, v2, w0)))
        n1 = np.where(c0, w2, np.where(c1, w0, np.where(c2, w1, w1)))
        n2 = np.where(c0, w1, np.where(c1, w2, np.where(c2, w0, w2)))
        v0, v1, v2 = n0, n1, n2
        ids = (ids << 2) | child
    return ids


def trixel_of(ra: float, dec: float, level: int) -> TrixelId:
    check_coordinates(ra, dec)
    if level < 0:
        raise ValueError("level must be non-negative")
    return TrixelId(_trixel_id_scalar(ra, dec, level), level)


@lru_cache(maxsize=1 << 16)
def trixel_vertices(t: TrixelId) -> tuple[tuple[float, float, float], ...]:
    v0, v1, v2 = ROOT_VERTICES[t.root]
    for c in t.digits():
        v0, v1, v2 = _child_vertices(v0, v1, v2)[c]
    return (v0, v1, v2)


def _mid(a, b):
    x, y, z = a[0] + b[0], a[1] + b[1], a[2] + b[2]
    n = math.sqrt(x * x + y * y + z * z)
    return (x / n, y / n, z / n)


def _child_vertices(v0, v1, v2):
    w0 = _mid(v1, v2)
    w1 = _mid(v0, v2)
    w2 = _mid(v0, v1)
    return ((v0, w2, w1), (v1, w0, w2), (v2, w1, w0), (w0, w1, w2))


# -- cone covers -------------------------------------------------------------


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _unit(a):
    n = math.sqrt(_dot(a, a))
    return (a[0] / n, a[1] / n, a[2] / n)


def _point_in_triangle(p, verts, eps=EDGE_EPS) -> bool:
    a, b, c = verts
    return (
        _dot(_unit(_cross(a, b)), p) >= -eps
        and _dot(_unit(_cross(b, c)), p) >= -eps
        and _dot(_unit(_cross(c, a)), p) >= -eps
    )


def _arc_within(center, a, b, sin_r: float, r_over_90: bool) -> bool:
    """True when the minor arc a-b passes within the cap radius of center."""
    n = _unit(_cross(a, b))
    d = _dot(n, center)
    if not r_over_90 and abs(d) > sin_r + EDGE_EPS:
        return False
    proj = (center[0] - d * n[0], center[1] - d * n[1], center[2] - d * n[2])
    if _dot(proj, proj) < 1e-30:
        return False  # center is a pole of the arc; endpoints decide
    return _dot(_cross(a, proj), n) >= -EDGE_EPS and _dot(_cross(proj, b), n) >= -EDGE_EPS


def _intersects(verts, center, cos_r: float, sin_r: float, r_over_90: bool) -> bool:
    if any(_dot(v, center) >= cos_r - EDGE_EPS for v in verts):
        return True
    if _point_in_triangle(center, verts):
        return True
    a, b, c = verts
    return (
        _arc_within(center, a, b, sin_r, r_over_90)
        or _arc_within(center, b, c, sin_r, r_over_90)
        or _arc_within(center, c, a, sin_r, r_over_90)
    )


class _Cap:
    __slots__ = ("center", "radius", "cos_r", "sin_r", "over_90", "complement")

    def __init__(self, center, radius_deg: float):
        r = math.radians(radius_deg)
        self.center = center
        self.radius = radius_deg
        self.cos_r = math.cos(r)
        self.sin_r = math.sin(r)
        self.over_90 = radius_deg > 90.0
        self.complement = None
        if self.over_90:
            anti = (-center[0], -center[1], -center[2])
            self.complement = _Cap(anti, 180.0 - radius_deg) if radius_deg < 180.0 else None

    def intersects(self, verts) -> bool:
        return _intersects(verts, self.center, self.cos_r, self.sin_r, self.over_90)

    def contains_triangle(self, verts) -> bool:
        if not self.over_90:
            return all(_dot(v, self.center) >= self.cos_r + EDGE_EPS for v in verts)
        if self.complement is None:
            return True
        return not self.complement.intersects(verts)


def cone_cover(q: ConeQuery, level: int) -> set[TrixelId]:
    """Sound cover of the cone by trixels at or above ``level``.

    Trixels wholly inside the cone are returned at the coarsest level that
    is wholly inside; boundary trixels are refined down to ``level``.
    """
    if q.radius >= 180.0:
        return {TrixelId(r, 0) for r in range(8)}
    cap = _Cap(q.center, q.radius)
    out: set[TrixelId] = set()
    stack = [(TrixelId(r, 0), ROOT_VERTICES[r]) for r in range(8)]
    while stack:
        t, verts = stack.pop()
        if not cap.intersects(verts):
            continue
        if t.level >= level or cap.contains_triangle(verts):
            out.add(t)
            continue
        for c, cv in enumerate(_child_vertices(*verts)):
            stack.append((TrixelId((t.id << 2) | c, t.level + 1), cv))
    return out


def expand_to_level(trixels: Iterable[TrixelId], level: int) -> set[TrixelId]:
    out: set[TrixelId] = set()
    for t in trixels:
        if t.level == level:
            out.add(t)
        elif t.level < level:
            out.update(t.descendants(level))
        else:
            out.add(t.ancestor(level))
    return out


@lru_cache(maxsize=1 << 16)
def edge_normals(t: TrixelId) -> tuple:
    a, b, c = trixel_vertices(t)
    return (_unit(_cross(a, b)), _unit(_cross(b, c)), _unit(_cross(c, a)))


def contains_point(t: TrixelId, ra: float, dec: float, eps: float = EDGE_EPS) -> bool:
    p = radec_to_vector(ra, dec)
    return all(_dot(n, p) >= -eps for n in edge_normals(t))


def min_edge_distance(ra: float, dec: float, t: TrixelId) -> float:
    """Angular distance (degrees) from an interior point to the trixel boundary."""
    p = radec_to_vector(ra, dec)
    d = min(abs(_dot(n, p)) for n in edge_normals(t))
    return math.degrees(math.asin(min(1.0, d)))


# -- time --------------------------------------------------------------------


def time_bucket(epoch: float, bucket_width: float) -> int:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if bucket_width <= 0:
        raise ValueError("bucket width must be positive")
    return int(math.floor(epoch / bucket_width))


def buckets_for_range(epoch_range: tuple[float, float], bucket_width: float) -> range:
    lo, hi = epoch_range
    if hi < lo:
        return range(0)
    return range(time_bucket(max(lo, 0.0), bucket_width), time_bucket(max(hi, 0.0), bucket_width) + 1)


def partition_key_of(ra: float, dec: float, epoch: float, cfg: IndexConfig) -> PartitionKey:
    return PartitionKey(trixel_of(ra, dec, cfg.partition_level), time_bucket(epoch, cfg.bucket_width))


def partitions_for(
    q: ConeQuery | None,
    epoch_range: tuple[float, float] | None,
    cfg: IndexConfig = IndexConfig(),
    existing: Iterable[PartitionKey] | None = None,
) -> set[PartitionKey]:
    """Partition keys that may hold rows inside the cone and epoch range.

    ``None`` for the cone means the whole sky and for the range all time.
    An open time range can only be enumerated against ``existing`` keys.
    """
    if q is None:
        q = ConeQuery(0.0, 0.0, 180.0)
    cells = expand_to_level(cone_cover(q, cfg.partition_level), cfg.partition_level)
    if existing is not None:
        keys = [k for k in existing if k.trixel in cells]
        if epoch_range is not None:
            wanted = buckets_for_range(epoch_range, cfg.bucket_width)
            keys = [k for k in keys if k.bucket in wanted]
        return set(keys)
    if epoch_range is None:
        raise ValueError("an open epoch range needs the set of existing partitions")
    return {PartitionKey(t, b) for t in cells for b in buckets_for_range(epoch_range, cfg.bucket_width)}


# -- index chunks ------------------------------------------------------------


@dataclass
class IndexChunk:
    """Slice of the spatial index covering one trixel prefix."""

    prefix: TrixelId
    max_level: int = DEFAULT_MAX_LEVEL
    entries: dict[int, list[tuple[PartitionKey, tuple]]] = field(default_factory=dict)
    replicas: int = 1

    def add(self, trixel_id: int, key: PartitionKey, locator: tuple) -> None:
        if trixel_id >> (2 * (self.max_level - self.prefix.level)) != self.prefix.id:
            raise ValueError(f"trixel {trixel_id} outside chunk {self.prefix}")
        self.entries.setdefault(trixel_id, []).append((key, locator))

    def lookup(self, trixel_id: int) -> list[tuple[PartitionKey, tuple]]:
        return list(self.entries.get(trixel_id, ()))

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())


def all_trixels(level: int) -> list[TrixelId]:
    return [TrixelId(i, level) for i in range(8 << (2 * level))]
