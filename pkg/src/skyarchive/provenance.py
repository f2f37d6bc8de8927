"""Provenance records and on-demand regeneration of virtual products."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from typing import Callable

from ._sync import LockState
from .catalog import CatalogStore, SourceRecord
from .errors import (
    ChecksumMismatch,
    InputsMissing,
    UnknownPartition,
    UnknownProduct,
    UnknownRecipe,
    UnknownRelease,
    UnknownLogicalPath,
)
from .filemap import FileMap, file_checksum
from .htm import ConeQuery, PartitionKey
from .versions import ReleaseManager

RecipeFn = Callable[[list[bytes], dict], bytes]


def bytes_checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=16).hexdigest()


@dataclass(frozen=True)
class Recipe:
    recipe_id: str
    version: str
    fn: RecipeFn
    n_inputs: int | None = None  # None accepts any count


def _records(blob: bytes) -> list[dict]:
    return [json.loads(line) for line in blob.decode().splitlines() if line]


def _dump(rows: list[dict]) -> bytes:
    return "".join(SourceRecord.from_dict(r).to_json() + "\n" for r in rows).encode()


def _identity(inputs, params):
    return inputs[0]


def _flux_scale(inputs, params):
    factor = float(params["factor"])
    rows = _records(inputs[0])
    for r in rows:
        r["flux"] = r["flux"] * factor
    return _dump(rows)


def _union(inputs, params):
    rows = [r for blob in inputs for r in _records(blob)]
    rows.sort(key=lambda r: (r["visit_id"], r["ccd_id"], r["source_id"]))
    return _dump(rows)


def _cone_extract(inputs, params):
    cone = ConeQuery(float(params["ra"]), float(params["dec"]), float(params["radius"]))
    rows = [r for blob in inputs for r in _records(blob) if cone.contains(r["ra"], r["dec"])]
    return _dump(rows)


def _flux_histogram(inputs, params):
    bins = int(params.get("bins", 10))
    hi = float(params.get("max_flux", 1000.0))
    counts = [0] * bins
    for blob in inputs:
        for r in _records(blob):
            counts[min(bins - 1, int(r["flux"] / hi * bins))] += 1
    return json.dumps({"bins": bins, "max_flux": hi, "counts": counts}, sort_keys=True).encode()


def _file_header_digest(inputs, params):
    return b"".join(hashlib.sha256(b).digest() for b in inputs)


BUILTIN_RECIPES = (
    Recipe("identity", "1.0", _identity, 1),
    Recipe("flux_scale", "1.0", _flux_scale, 1),
    Recipe("union", "1.0", _union, None),
    Recipe("cone_extract", "1.0", _cone_extract, None),
    Recipe("flux_histogram", "1.0", _flux_histogram, None),
    Recipe("digest", "1.0", _file_header_digest, None),
)


@dataclass(frozen=True)
class InputRef:
    """An immutable input: a released partition or a registered file."""

    kind: str  # "partition" or "file"
    ref: str  # "<release_id>/<partition key>" or a logical path
    checksum: str = ""

    def to_dict(self) -> dict:
        return {"checksum": self.checksum, "kind": self.kind, "ref": self.ref}

    @classmethod
    def partition(cls, release_id: str, key: PartitionKey) -> "InputRef":
        return cls("partition", f"{release_id}/{key}")

    @classmethod
    def file(cls, logical_path: str) -> "InputRef":
        return cls("file", logical_path)


@dataclass
class ProvenanceRecord:
    product_id: str
    recipe_id: str
    recipe_version: str
    params: list[tuple[str, object]]
    inputs: list[InputRef]
    output_checksum: str

    def to_json(self) -> str:
        doc = {
            "product_id": self.product_id,
            "recipe_id": self.recipe_id,
            "recipe_version": self.recipe_version,
            "params": [[k, v] for k, v in self.params],
            "inputs": [i.to_dict() for i in self.inputs],
            "output_checksum": self.output_checksum,
        }
        return json.dumps(doc, sort_keys=True)


class ProvenanceStore(LockState):
    _lock_factories = {"_lock": threading.Lock}

    def __init__(self, store: CatalogStore, releases: ReleaseManager, files: FileMap):
        self.store = store
        self.releases = releases
        self.files = files
        self.recipes: dict[str, Recipe] = {r.recipe_id: r for r in BUILTIN_RECIPES}
        self.records: dict[str, ProvenanceRecord] = {}
        self.products: dict[str, bytes] = {}  # materialized products only
        self._lock = threading.Lock()

    def register_recipe(self, recipe: Recipe) -> None:
        self.recipes[recipe.recipe_id] = recipe

    def _recipe(self, recipe_id: str) -> Recipe:
        try:
            return self.recipes[recipe_id]
        except KeyError:
            raise UnknownRecipe(f"no recipe {recipe_id!r}") from None

    def _load(self, ref: InputRef) -> tuple[bytes, str]:
        """Input bytes plus the checksum that pins them."""
        try:
            if ref.kind == "partition":
                rid, key = ref.ref.split("/", 1)
                rel = self.releases.get(rid)
                pkey = PartitionKey.parse(key)
                if pkey not in rel.checksums:
                    raise InputsMissing(f"{key} is not a member of {rid}")
                part = self.store.get(pkey)
                if part.checksum() != rel.checksums[pkey]:
                    raise ChecksumMismatch(f"partition {key} differs from release {rid}")
                return part.export_ndjson().encode(), rel.checksums[pkey]
            if ref.kind == "file":
                path = self.files.resolve(ref.ref)
                entry = self.files.entries[ref.ref]
                if file_checksum(path) != entry.checksum:
                    raise ChecksumMismatch(f"file {ref.ref} differs from its registered checksum")
                with open(path, "rb") as fh:
                    return fh.read(), entry.checksum
        except (UnknownRelease, UnknownPartition, UnknownLogicalPath, FileNotFoundError) as exc:
            raise InputsMissing(str(exc)) from exc
        raise ValueError(f"unknown input kind {ref.kind!r}")

    def _run(self, recipe: Recipe, params: list[tuple[str, object]], inputs: list[InputRef], pin: bool):
        if recipe.n_inputs is not None and len(inputs) != recipe.n_inputs:
            raise ValueError(f"recipe {recipe.recipe_id} takes {recipe.n_inputs} inputs")
        blobs, pinned = [], []
        for ref in inputs:
            blob, checksum = self._load(ref)
            if pin and ref.checksum and ref.checksum != checksum:
                raise ChecksumMismatch(f"input {ref.ref} checksum {checksum} != recorded {ref.checksum}")
            blobs.append(blob)
            pinned.append(InputRef(ref.kind, ref.ref, checksum))
        return recipe.fn(blobs, dict(params)), pinned

    def record_provenance(
        self,
        product_id: str,
        recipe_id: str,
        params: dict | list | None = None,
        inputs: list[InputRef] | None = None,
        materialize: bool = True,
    ) -> ProvenanceRecord:
        recipe = self._recipe(recipe_id)
        items = list(params.items()) if isinstance(params, dict) else list(params or [])
        product, pinned = self._run(recipe, items, list(inputs or []), pin=False)
        rec = ProvenanceRecord(product_id, recipe.recipe_id, recipe.version, items, pinned, bytes_checksum(product))
        with self._lock:
            if product_id in self.records:
                raise ValueError(f"product {product_id!r} already recorded")
            self.records[product_id] = rec
            if materialize:
                self.products[product_id] = product
        return rec

    def get_record(self, product_id: str) -> ProvenanceRecord:
        try:
            return self.records[product_id]
        except KeyError:
            raise UnknownProduct(f"no provenance for {product_id!r}") from None

    def delete_product(self, product_id: str) -> None:
        """Drop the materialized bytes; the provenance record stays."""
        self.get_record(product_id)
        with self._lock:
            self.products.pop(product_id, None)

    def fetch(self, product_id: str) -> bytes:
        blob = self.products.get(product_id)
        return blob if blob is not None else self.regenerate(product_id)

    def regenerate(self, product_id: str) -> bytes:
        rec = self.get_record(product_id)
        recipe = self._recipe(rec.recipe_id)
        if recipe.version != rec.recipe_version:
            raise UnknownRecipe(f"recipe {rec.recipe_id} {rec.recipe_version} is no longer registered")
        product, _ = self._run(recipe, rec.params, rec.inputs, pin=True)
        if bytes_checksum(product) != rec.output_checksum:
            raise ChecksumMismatch(f"regenerated {product_id} does not match its recorded checksum")
        return product
