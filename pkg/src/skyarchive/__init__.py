"""Partitioned, spatially indexed catalog archive for nightly survey data."""

from .archive import Archive
from .balancer import HeatMap, NodeDescriptor, Topology
from .catalog import AstroObject, CatalogStore, Partition, SourceRecord
from .errors import ArchiveError
from .filemap import FileMap
from .harness import NightReport, SimConfig, simulate_night
from .htm import ConeQuery, IndexConfig, PartitionKey, TrixelId, cone_cover, partitions_for, trixel_of
from .ingest import BudgetConfig, DetectionBatch, IngestConfig, IngestService
from .merge import MergeService
from .provenance import ProvenanceStore, Recipe
from .router import Query, Router
from .versions import ReleaseManager, VersionStore

__all__ = [
    "Archive", "ArchiveError", "AstroObject", "BudgetConfig", "CatalogStore", "ConeQuery",
    "DetectionBatch", "FileMap", "HeatMap", "IndexConfig", "IngestConfig", "IngestService",
    "MergeService", "NightReport", "NodeDescriptor", "Partition", "PartitionKey", "ProvenanceStore",
    "Query", "Recipe", "ReleaseManager", "Router", "SimConfig", "SourceRecord", "Topology",
    "TrixelId", "VersionStore", "cone_cover", "partitions_for", "simulate_night", "trixel_of",
]
__version__ = "0.1.0"
