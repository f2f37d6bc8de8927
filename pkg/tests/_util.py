"""Shared generators and brute-force oracles for the test suite."""

from __future__ import annotations

import math

import numpy as np

from skyarchive.catalog import FILTERS, SourceRecord


def sphere_points(rng: np.random.Generator, n: int, ra=(0.0, 360.0), dec=(-90.0, 90.0)):
    """Uniform on the sphere (restricted to an ra/dec box)."""
    lo, hi = np.sin(np.radians(dec[0])), np.sin(np.radians(dec[1]))
    d = np.degrees(np.arcsin(rng.uniform(lo, hi, n)))
    r = rng.uniform(ra[0], ra[1], n) % 360.0
    return r, np.clip(d, -90.0, 90.0)


def random_records(rng, n, epochs=(0.0, 36000.0), first_id=0, visit_id=1, ccd_id=0, **box):
    ra, dec = sphere_points(rng, n, **box)
    ep = rng.uniform(epochs[0], epochs[1], n)
    flux = rng.lognormal(3.0, 1.0, n)
    filt = rng.integers(0, len(FILTERS), n)
    return [
        SourceRecord(first_id + i, visit_id, ccd_id, float(ra[i]), float(dec[i]), float(ep[i]), float(flux[i]), FILTERS[filt[i]])
        for i in range(n)
    ]


def haversine_deg(ra1, dec1, ra2, dec2):
    """Great-circle distance via haversine; deliberately a different formula from the library."""
    ra1, dec1, ra2, dec2 = map(np.radians, (ra1, dec1, ra2, dec2))
    a = np.sin((dec2 - dec1) / 2) ** 2 + np.cos(dec1) * np.cos(dec2) * np.sin((ra2 - ra1) / 2) ** 2
    return np.degrees(2 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0))))


def brute_cone(records, ra, dec, radius, epoch_range=None):
    """Full scan oracle: source ids inside the cone and epoch range."""
    if not records:
        return set()
    r_ra = np.array([r.ra for r in records])
    r_dec = np.array([r.dec for r in records])
    ep = np.array([r.epoch for r in records])
    m = haversine_deg(ra, dec, r_ra, r_dec) <= radius if radius < 180 else np.ones(len(records), bool)
    if epoch_range is not None:
        m &= (ep >= epoch_range[0]) & (ep <= epoch_range[1])
    return {records[i].source_id for i in np.flatnonzero(m)}


def near_boundary(records, ra, dec, radius, tol=1e-9):
    r_ra = np.array([r.ra for r in records])
    r_dec = np.array([r.dec for r in records])
    d = haversine_deg(ra, dec, r_ra, r_dec)
    return {records[i].source_id for i in np.flatnonzero(np.abs(d - radius) < tol)}


def arcsec(x: float) -> float:
    return x / 3600.0


def percentile(values, q):
    return float(np.percentile(values, q)) if len(values) else math.nan
