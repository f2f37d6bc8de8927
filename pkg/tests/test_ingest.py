import math

import numpy as np
import pytest
from _util import arcsec, haversine_deg, random_records
from hypothesis import given, settings
from hypothesis import strategies as st

from skyarchive.catalog import AstroObject, CatalogStore, SourceRecord
from skyarchive.errors import MergePending, NightClosed, SimulatedCrash, ValidationRequired
from skyarchive.ingest import BASE, BudgetConfig, DetectionBatch, IngestConfig, IngestService, _absorb


def service(**cfg):
    return IngestService(CatalogStore(), config=IngestConfig(**cfg), clock=lambda: 100.0)


def rec(sid, ra, dec, flux=10.0, visit=1, ccd=0, epoch=100.0, filt="r"):
    return SourceRecord(sid, visit, ccd, ra, dec, epoch, flux, filt)


def staged(svc, records, visit=1, ccd=0, server="A", received_at=0.0):
    batch = DetectionBatch(visit, ccd, server, records, received_at=received_at)
    report = svc.validate_staged(batch)
    assert report.ok, report.violations
    return svc.stage_batch(batch)


def test_budget_config_defaults_and_validation():
    b = BudgetConfig()
    assert (b.alert_latency_budget, b.per_image_ingest_budget, b.visit_cadence, b.ccd_count) == (60, 3, 13, 200)
    assert b.night_length == 36000 and b.target_ingest_rate == 35e6
    with pytest.raises(ValueError):
        BudgetConfig(visit_cadence=0)


@pytest.mark.parametrize(
    "bad,check",
    [
        (dict(ra=360.0), "ra out of range"),
        (dict(dec=-91.0), "dec out of range"),
        (dict(flux=float("nan")), "flux not finite"),
        (dict(flux=-1.0), "flux negative"),
        (dict(epoch=36001.0), "epoch outside night window"),
        (dict(filt="q"), "unknown filter"),
        (dict(visit=2), "visit/ccd mismatch with header"),
    ],
)
def test_validation_checks(bad, check):
    svc = service()
    good = [rec(i, 10.0 + i * 1e-3, 0.0) for i in range(5)]
    fields = dict(sid=99, ra=11.0, dec=1.0)
    fields.update(bad)
    batch = DetectionBatch(1, 0, "A", good + [rec(**fields)])
    report = svc.validate_staged(batch)
    assert not report.ok
    assert [(v.index, v.check) for v in report.violations] == [(5, check)]
    with pytest.raises(ValidationRequired):
        svc.stage_batch(batch)
    assert svc.staged_rows == 0


def test_duplicate_source_ids_and_size_limit():
    svc = service(max_batch_records=3)
    batch = DetectionBatch(1, 0, "A", [rec(1, 10, 0), rec(2, 11, 0), rec(1, 12, 0), rec(3, 13, 0)])
    checks = [v.check for v in svc.validate_staged(batch).violations]
    assert "duplicate source_id" in checks
    assert any("exceeds max" in c for c in checks)


def test_ccd_out_of_range():
    svc = service()
    report = svc.validate_staged(DetectionBatch(1, 200, "A", [rec(1, 10, 0, ccd=200)]))
    assert not report.ok


def test_staging_does_not_touch_catalog():
    svc = service()
    staged(svc, [rec(i, 10 + i * 0.01, 5) for i in range(10)])
    assert svc.staged_rows == 10
    assert svc.store.total_rows == 0


def test_dual_server_duplicate_suppressed():
    svc = service()
    recs = [rec(i, 10 + i * 0.01, 5) for i in range(10)]
    first = staged(svc, recs, server="A")
    second = staged(svc, recs, server="B")
    assert (first.accepted_rows, first.duplicate) == (10, False)
    assert (second.accepted_rows, second.duplicate) == (0, True)
    assert svc.staged_rows == 10


def test_crash_then_replay_leaves_no_partial_rows():
    svc = service()
    recs = [rec(i, 10 + i * 0.01, 5) for i in range(10)]
    batch = DetectionBatch(1, 0, "A", recs)
    svc.validate_staged(batch)
    with pytest.raises(SimulatedCrash):
        svc.stage_batch(batch, crash_after=4)
    # the partial write is visible (staging is non-transactional) but not committed
    assert len(svc.tables[0].rows[1]) == 4
    assert svc.staged_rows == 0
    res = svc.stage_batch(batch)
    assert res.accepted_rows == 10
    assert svc.tables[0].rows[1] == recs
    assert svc.export_ndjson(0).count("\n") == 10


def test_night_lifecycle():
    svc = service()
    staged(svc, [rec(1, 10, 5)])
    svc.close_night()
    with pytest.raises(NightClosed):
        staged(svc, [rec(2, 10, 5, visit=2)], visit=2)
    with pytest.raises(MergePending):
        svc.truncate_night()
    base = service(role=BASE)
    staged(base, [rec(1, 10, 5)])
    base.close_night()
    report = base.truncate_night()
    assert (report.rows_dropped, report.tables_truncated) == (1, 200)
    assert base.current_night == 1 and base.staged_rows == 0


def test_visit_ready_and_timeout():
    svc = service()
    staged(svc, [rec(1, 10, 5)], received_at=0.0)
    assert not svc.visit_ready(1, now=5.0)
    assert svc.visit_ready(1, now=13.0)
    assert not svc.visit_ready(2, now=100.0)


# -- association ------------------------------------------------------------------


def nearest_oracle(objects, r, radius):
    """Brute force: closest object within radius, lowest id on ties."""
    best = None
    for o in objects:
        d = float(haversine_deg(r.ra, r.dec, o.ra, o.dec))
        if d <= radius and (best is None or (d, o.object_id) < best[0]):
            best = ((d, o.object_id), o.object_id)
    return None if best is None else best[1]


def test_association_matches_brute_force_nearest():
    rng = np.random.default_rng(0)
    svc = service()
    # history: objects seeded by visit 1
    hist = random_records(rng, 400, epochs=(10, 20), visit_id=1, ra=(30, 31), dec=(0, 1))
    staged(svc, hist, visit=1)
    first = svc.associate(1)
    assert len(first.new_objects) == 400 - len(first.matched)
    objects_before = dict(svc.store.objects)
    # visit 2 revisits with jitter plus some far-away sources
    srcs = []
    for i, h in enumerate(hist[:300]):
        srcs.append(rec(10_000 + i, h.ra + rng.normal(0, arcsec(0.4)), h.dec + rng.normal(0, arcsec(0.4)), visit=2, epoch=50))
    srcs += random_records(rng, 50, epochs=(50, 50), first_id=20_000, visit_id=2, ra=(100, 101), dec=(0, 1))
    staged(svc, srcs, visit=2)
    result = svc.associate(2)
    got = dict(result.matched)
    for s in srcs:
        want = nearest_oracle(objects_before.values(), s, arcsec(1.0))
        assert got.get(s.source_id) == want
    assert len(result.new_objects) == len(srcs) - len(result.matched)


def test_same_visit_sources_never_match_each_other():
    svc = service()
    staged(svc, [rec(1, 10.0, 5.0), rec(2, 10.0 + arcsec(0.1), 5.0)])
    result = svc.associate(1)
    assert len(result.new_objects) == 2 and not result.matched


def test_tie_goes_to_lower_object_id():
    svc = service()
    store = svc.store
    d = arcsec(0.5)
    for oid, ra in ((7, 10.0 - d), (3, 10.0 + d)):
        store.upsert_object(AstroObject(oid, ra, 0.0, 0.0, 0.0, 1, flux_mean=10.0))
    staged(svc, [rec(1, 10.0, 0.0)])
    assert svc.associate(1).matched == [(1, 3)]


def _history(svc, fluxes, ra=50.0, dec=10.0):
    for v, f in enumerate(fluxes, start=1):
        staged(svc, [rec(v, ra, dec, flux=f, visit=v)], visit=v)
        svc.associate(v)


def test_flux_anomaly_alert_rule():
    svc = service()
    _history(svc, [100.0, 101.0, 99.0])
    staged(svc, [rec(50, 50.0, 10.0, flux=200.0, visit=4)], visit=4)
    alerts = svc.associate(4).alerts
    assert [a.alert_type for a in alerts] == ["flux_anomaly"]

    quiet = service()
    _history(quiet, [100.0, 101.0, 99.0])
    staged(quiet, [rec(50, 50.0, 10.0, flux=103.0, visit=4)], visit=4)
    assert quiet.associate(4).alerts == []


def test_flux_anomaly_needs_three_prior_sources():
    svc = service()
    _history(svc, [100.0, 101.0])
    staged(svc, [rec(50, 50.0, 10.0, flux=10_000.0, visit=3)], visit=3)
    assert svc.associate(3).alerts == []


def test_alert_latency_is_alert_time_minus_receipt():
    svc = service()
    staged(svc, [rec(1, 10.0, 5.0)], received_at=40.0)
    alerts = svc.associate(1, now=47.5).alerts
    assert [(a.alert_type, a.latency_s) for a in alerts] == [("new_object", 7.5)]


@settings(max_examples=60)
@given(st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=1, max_size=30))
def test_running_flux_statistics_match_numpy(fluxes):
    o = AstroObject(1, 10.0, 0.0, 0.0, 0.0, 1, flux_mean=fluxes[0], flux_m2=0.0)
    for i, f in enumerate(fluxes[1:], start=1):
        o = _absorb(o, SourceRecord(i, 1, 0, 10.0, 0.0, float(i), f, "r"))
    assert o.n_sources == len(fluxes)
    assert o.flux_mean == pytest.approx(float(np.mean(fluxes)), rel=1e-9, abs=1e-6)
    if len(fluxes) > 1:
        assert o.flux_std == pytest.approx(float(np.std(fluxes, ddof=1)), rel=1e-6, abs=1e-3)


def test_mean_position_across_ra_wrap():
    o = AstroObject(1, 359.9999, 0.0, 0.0, 0.0, 1)
    o = _absorb(o, SourceRecord(2, 1, 0, 0.0001, 0.0, 1.0, 1.0, "r"))
    assert min(o.ra, 360 - o.ra) < 1e-6
    assert math.isclose(o.dec, 0.0, abs_tol=1e-9)


def test_batch_ndjson_round_trip():
    recs = [rec(i, 10 + i, 5) for i in range(3)]
    batch = DetectionBatch(1, 0, "B", recs)
    back = DetectionBatch.from_ndjson(batch.to_ndjson(), received_at=3.0)
    assert (back.visit_id, back.ccd_id, back.server_id, back.records) == (1, 0, "B", recs)
    with pytest.raises(ValueError):
        DetectionBatch.from_ndjson('{"visit_id": 1}\n')
