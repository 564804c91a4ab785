"""Dated-site ingestion and precision-weighted site summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geo import GeoPoint

DEFAULT_START_BC = 6572.0
DEFAULT_SOURCE = GeoPoint(lon=37.1, lat=41.1)

SITE_COLUMNS = ("site_id", "name", "lon", "lat", "t_bc", "sigma")


@dataclass(frozen=True)
class DatedSample:
    site_id: str
    t: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sample at site {self.site_id}: sigma must be positive")


@dataclass(frozen=True)
class SiteRecord:
    site_id: str
    location: GeoPoint
    samples: tuple[DatedSample, ...]
    t_summary: float
    sigma_summary: float
    name: str = ""

    @property
    def m(self) -> int:
        return len(self.samples)


def summarize(samples: Sequence[DatedSample] | Sequence[tuple[float, float]],
              sigma_floor: float | None = None) -> tuple[float, float]:
    """Precision-weighted mean date and its standard deviation.

    ``t = sum(t_j / s_j^2) / sum(1 / s_j^2)`` and ``sigma^2 = 1 / sum(1 / s_j^2)``.
    With ``sigma_floor`` set, the returned sigma is raised to at least that value.
    """
    if len(samples) == 0:
        raise ValueError("cannot summarize an empty sample list")
    if isinstance(samples[0], DatedSample):
        t = np.array([s.t for s in samples], dtype=float)
        s = np.array([s.sigma for s in samples], dtype=float)
    else:
        arr = np.asarray(samples, dtype=float)
        t, s = arr[:, 0], arr[:, 1]
    if np.any(~(s > 0)):
        raise ValueError("all sigmas must be positive")
    w = 1.0 / s**2
    wsum = w.sum()
    t_bar = float((t * w).sum() / wsum)
    sigma = float(np.sqrt(1.0 / wsum))
    if sigma_floor is not None:
        sigma = max(sigma, float(sigma_floor))
    return t_bar, sigma


def to_elapsed(t_bc, start_bc: float = DEFAULT_START_BC):
    """Years elapsed since ``start_bc`` for calendar dates in years BC."""
    return start_bc - np.asarray(t_bc, dtype=float) if np.ndim(t_bc) else start_bc - float(t_bc)


def to_bc(elapsed, start_bc: float = DEFAULT_START_BC):
    return start_bc - np.asarray(elapsed, dtype=float) if np.ndim(elapsed) else start_bc - float(elapsed)


def load_sites(path: str | Path, sigma_floor: float | None = None) -> list[SiteRecord]:
    """Read per-object rows ``site_id,name,lon,lat,t_bc,sigma`` grouped into sites.

    Sites keep first-appearance order.  Lines starting with ``#`` are ignored.
    """
    grouped: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [(i, ln) for i, ln in enumerate(fh, start=1) if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = next(csv.reader([lines[0][1]]))
    header = [h.strip() for h in header]
    missing = [c for c in SITE_COLUMNS if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    for lineno, line in lines[1:]:
        row = next(csv.reader([line]))
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        rec = dict(zip(header, (v.strip() for v in row)))
        try:
            lon, lat = float(rec["lon"]), float(rec["lat"])
            sample = DatedSample(rec["site_id"], float(rec["t_bc"]), float(rec["sigma"]))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from exc
        if not rec["site_id"]:
            raise ValueError(f"{path}:{lineno}: empty site_id")
        entry = grouped.setdefault(rec["site_id"], {"name": rec["name"], "loc": (lon, lat), "samples": []})
        if not np.allclose(entry["loc"], (lon, lat), rtol=0, atol=1e-9):
            raise ValueError(f"{path}:{lineno}: site {rec['site_id']} has inconsistent location")
        entry["samples"].append(sample)

    sites = []
    for sid, entry in grouped.items():
        t, s = summarize(entry["samples"], sigma_floor)
        sites.append(SiteRecord(sid, GeoPoint(*entry["loc"]), tuple(entry["samples"]), t, s, entry["name"]))
    return sites


def write_sites(path: str | Path, sites: Sequence[SiteRecord], comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(SITE_COLUMNS)
        for site in sites:
            for s in site.samples:
                w.writerow([site.site_id, site.name, repr(site.location.lon), repr(site.location.lat),
                            repr(s.t), repr(s.sigma)])


@dataclass(frozen=True, eq=False)
class SiteData:
    """Arrays consumed by the statistical model (times in years since the source date)."""

    site_ids: tuple[str, ...]
    coords: np.ndarray       # (n, 2) lon, lat in degrees
    t: np.ndarray            # (n,) elapsed years
    sigma: np.ndarray        # (n,) summary standard deviations
    start_bc: float = DEFAULT_START_BC
    names: tuple[str, ...] = field(default=())

    @property
    def n(self) -> int:
        return len(self.site_ids)

    @classmethod
    def from_records(cls, sites: Sequence[SiteRecord], start_bc: float = DEFAULT_START_BC) -> "SiteData":
        return cls(
            tuple(s.site_id for s in sites),
            np.array([(s.location.lon, s.location.lat) for s in sites], dtype=float).reshape(-1, 2),
            np.array([to_elapsed(s.t_summary, start_bc) for s in sites], dtype=float),
            np.array([s.sigma_summary for s in sites], dtype=float),
            start_bc,
            tuple(s.name for s in sites),
        )

    def subset(self, idx) -> "SiteData":
        idx = np.asarray(idx)
        return SiteData(tuple(np.array(self.site_ids)[idx]), self.coords[idx], self.t[idx],
                        self.sigma[idx], self.start_bc,
                        tuple(np.array(self.names)[idx]) if self.names else ())
