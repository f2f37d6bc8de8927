"""``skyarchive`` command line: thin JSON-printing wrappers over the archive."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .archive import Archive
from .errors import EXIT_DATA, EXIT_OK, EXIT_USAGE, ArchiveError, ConfigError
from .harness import MetricsStream, SimConfig, load_config, simulate_night
from .htm import ConeQuery, PartitionKey
from .ingest import DetectionBatch
from .router import Query


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")


def _floats(text: str, n: int, what: str) -> tuple[float, ...]:
    parts = text.split(",")
    if len(parts) != n:
        raise UsageError(f"--{what} expects {n} comma-separated numbers")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"--{what}: not a number in {text!r}") from None


# -- verbs --------------------------------------------------------------------


def cmd_status(archive: Archive, args) -> bool:
    _emit(archive.status())
    return False


def cmd_ingest(archive: Archive, args) -> bool:
    ingest = archive.ingest
    out = []
    visits = set()
    for path in args.files:
        try:
            batch = DetectionBatch.from_ndjson(Path(path).read_text(), received_at=time.time())
        except (ValueError, KeyError, TypeError) as exc:
            raise ArchiveError(f"{path}: {exc}") from None
        report = ingest.validate_staged(batch)
        doc = {"file": str(path), "visit_id": batch.visit_id, "ccd_id": batch.ccd_id,
               "valid": report.ok, "violations": [str(v) for v in report.violations[:20]]}
        if report.ok:
            res = ingest.stage_batch(batch)
            doc.update(accepted_rows=res.accepted_rows, duplicate=res.duplicate)
            visits.add(batch.visit_id)
        out.append(doc)
    result = {"batches": out}
    if args.associate:
        assoc = []
        for v in sorted(visits):
            r = ingest.associate(v)
            assoc.append({"visit_id": v, "matched": len(r.matched), "new_objects": len(r.new_objects),
                          "alerts": [json.loads(a.to_json()) for a in r.alerts]})
        result["association"] = assoc
    _emit(result)
    if any(not d["valid"] for d in out):
        raise _DataFailure()
    return True


class _DataFailure(Exception):
    """Verb already printed its result but must exit with a data error."""


def cmd_merge(archive: Archive, args) -> bool:
    archive.ingest.close_night(args.night)
    report = archive.merger.merge_night(args.night)
    archive.topology.sync_checksums()
    doc = {"merge": json.loads(report.to_json())}
    if not args.no_truncate:
        t = archive.ingest.truncate_night(args.night)
        doc["truncate"] = {"night_id": t.night_id, "tables_truncated": t.tables_truncated, "rows_dropped": t.rows_dropped}
    _emit(doc)
    return True


def cmd_release(archive: Archive, args) -> bool:
    rel = archive.release_live(validation_failures=args.validation_failures)
    _emit(rel.to_dict())
    return True


def cmd_query(archive: Archive, args) -> bool:
    if args.file:
        try:
            doc = json.loads(Path(args.file).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read query file: {exc}") from None
        query = Query.from_dict(doc)
    else:
        cone = ConeQuery(*_floats(args.cone, 3, "cone")) if args.cone else None
        epochs = _floats(args.epoch, 2, "epoch") if args.epoch else None
        query = Query(cone=cone, epoch_range=epochs, object_id=args.object, pool=args.pool,
                      farm_hint=args.farm, include_staging=args.include_staging)
    result = archive.router.query(query)
    sys.stdout.write(result.to_ndjson())
    # routing records heat, so the store changes when replicas are managed
    return bool(archive.topology.nodes)


def cmd_rebalance(archive: Archive, args) -> bool:
    plan = archive.topology.rebalance(args.factor)
    _emit(plan.to_dict())
    return True


def cmd_fail_node(archive: Archive, args) -> bool:
    archive.topology.fail_node(args.node_id)
    _emit({"node_id": args.node_id, "alive": False})
    return True


def cmd_recover_node(archive: Archive, args) -> bool:
    archive.topology.recover_node(args.node_id)
    _emit({"node_id": args.node_id, "alive": True})
    return True


def cmd_add_node(archive: Archive, args) -> bool:
    node = archive.topology.add_node(args.node_id, args.tier, farm=args.farm, capacity=args.capacity)
    _emit(node.to_dict())
    return True


def cmd_host(archive: Archive, args) -> bool:
    key = PartitionKey.parse(args.partition)
    archive.store.get(key)
    archive.topology.host(key, args.node_id)
    _emit({"partition": str(key), "replicas": archive.topology.replicas(key, alive_only=False)})
    return True


def cmd_topology(archive: Archive, args) -> bool:
    _emit(archive.topology.to_dict())
    return False


def cmd_export(archive: Archive, args) -> bool:
    key = PartitionKey.parse(args.partition)
    sys.stdout.write(archive.store.export_ndjson(key))
    return False


def cmd_simulate(archive: Archive, args) -> bool:
    if args.config:
        sim, budget = load_config(args.config)
    else:
        sim, budget = SimConfig(), archive.ingest.budget
    overrides = {k: getattr(args, k) for k in ("seed", "visits") if getattr(args, k) is not None}
    if overrides:
        sim = SimConfig(**{**sim.__dict__, **overrides})
    if sim.night_id != archive.ingest.current_night:
        sim = SimConfig(**{**sim.__dict__, "night_id": archive.ingest.current_night})
    if budget != archive.ingest.budget:
        if archive.store.partitions or archive.ingest.staged_rows:
            raise ConfigError("budget settings can only change on an empty store")
        archive = Archive(budget=budget, ingest=archive.ingest.config)
        args.replace_archive = archive
    out = None
    if args.metrics == "-":
        out = sys.stderr
    elif args.metrics:
        out = open(args.metrics, "w")
    try:
        report = simulate_night(sim, archive=archive, metrics=MetricsStream(out))
    finally:
        if out not in (None, sys.stderr):
            out.close()
    archive.set_clock(time.time)
    _emit(report.to_dict())
    return True


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="skyarchive", description=__doc__)
    p.add_argument("--store", default=".skyarchive", help="state directory (default: .skyarchive)")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    s = sub.add_parser("status", help="counts of partitions, rows, objects, nodes")
    s.set_defaults(fn=cmd_status)

    s = sub.add_parser("ingest", help="validate and stage ND-JSON detection batches")
    s.add_argument("files", nargs="+")
    s.add_argument("--associate", action="store_true", help="run association on the staged visits")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("merge", help="close the night, merge staged rows, truncate ingest tables")
    s.add_argument("--night", type=int, default=None)
    s.add_argument("--no-truncate", action="store_true")
    s.set_defaults(fn=cmd_merge)

    s = sub.add_parser("release", help="freeze all live partitions into a new release")
    s.add_argument("--validation-failures", type=int, default=0)
    s.set_defaults(fn=cmd_release)

    s = sub.add_parser("query", help="cone/epoch/object query; rows as ND-JSON")
    s.add_argument("--file")
    s.add_argument("--cone", help="ra,dec,radius in degrees")
    s.add_argument("--epoch", help="start,end")
    s.add_argument("--object", type=int)
    s.add_argument("--pool", default="latest")
    s.add_argument("--farm")
    s.add_argument("--include-staging", action="store_true")
    s.set_defaults(fn=cmd_query)

    s = sub.add_parser("rebalance", help="detect hot spots and apply a rebalance plan")
    s.add_argument("--factor", type=float, default=3.0)
    s.set_defaults(fn=cmd_rebalance)

    s = sub.add_parser("fail-node")
    s.add_argument("node_id")
    s.set_defaults(fn=cmd_fail_node)

    s = sub.add_parser("recover-node")
    s.add_argument("node_id")
    s.set_defaults(fn=cmd_recover_node)

    s = sub.add_parser("add-node")
    s.add_argument("node_id")
    s.add_argument("--tier", default="archive")
    s.add_argument("--farm", default="default")
    s.add_argument("--capacity", type=int, default=64)
    s.set_defaults(fn=cmd_add_node)

    s = sub.add_parser("host", help="place a replica of a partition on a node")
    s.add_argument("partition")
    s.add_argument("node_id")
    s.set_defaults(fn=cmd_host)

    s = sub.add_parser("topology", help="dump nodes and replicas")
    s.set_defaults(fn=cmd_topology)

    s = sub.add_parser("export", help="ND-JSON dump of one partition")
    s.add_argument("--partition", required=True, help="e.g. N0012:5")
    s.set_defaults(fn=cmd_export)

    s = sub.add_parser("simulate", help="run one synthetic observing night")
    s.add_argument("--config", help="flat key = value file")
    s.add_argument("--seed", type=int)
    s.add_argument("--visits", type=int)
    s.add_argument("--metrics", help="ND-JSON metrics file, or - for stderr")
    s.set_defaults(fn=cmd_simulate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _emit({"error": "E_USAGE", "message": str(exc)})
        return EXIT_USAGE
    archive = Archive.load(args.store)
    archive.set_clock(time.time)
    args.replace_archive = None
    code = EXIT_OK
    try:
        dirty = args.fn(archive, args)
    except _DataFailure:
        dirty, code = True, EXIT_DATA
    except BrokenPipeError:
        # reader went away (e.g. `| head`); keep Python from complaining at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        dirty = True
    except UsageError as exc:
        _emit({"error": "E_USAGE", "message": str(exc)})
        return EXIT_USAGE
    except ArchiveError as exc:
        _emit(exc.to_dict())
        return exc.exit_code
    except ValueError as exc:
        _emit({"error": "E_USAGE", "message": str(exc)})
        return EXIT_USAGE
    if dirty:
        (args.replace_archive or archive).save(args.store)
    return code


if __name__ == "__main__":
    sys.exit(main())
