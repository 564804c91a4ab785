"""Maximin Latin hypercube designs over the (nu, v_coast, v_river) box."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist

PAPER_BOUNDS = ((0.0, 120.0), (0.0, 3.0), (0.0, 2.0))
DESIGN_COLUMNS = ("nu", "v_coast", "v_river")


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    points: np.ndarray
    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))

    def __len__(self) -> int:
        return self.points.shape[0]

    def normalized(self) -> np.ndarray:
        lo, hi = np.array(self.bounds).T
        return (self.points - lo) / (hi - lo)

    def is_latin(self) -> bool:
        """Exactly one point in each of the p equal-width strata, per axis."""
        p = len(self)
        strata = np.floor(self.normalized() * p).astype(int)
        return all(np.array_equal(np.sort(strata[:, j]), np.arange(p)) for j in range(strata.shape[1]))


def _check_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 0] >= b[:, 1]):
        raise ValueError("bounds must be a sequence of (low, high) with low < high")
    return b


def random_lhd(p: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """One random Latin hypercube on the unit cube, uniform within strata."""
    perms = np.argsort(rng.random((dim, p)), axis=1).T
    return (perms + rng.random((p, dim))) / p


def min_distance(unit_points: np.ndarray) -> float:
    return float(pdist(unit_points).min())


def lhd_maximin(p: int, bounds=PAPER_BOUNDS, n_candidates: int = 5000,
                seed: int | np.random.Generator | None = None,
                return_scores: bool = False):
    """Best of ``n_candidates`` random LHDs by minimum pairwise distance.

    Distances are measured in unit-box coordinates because the axes carry
    incomparable units.
    """
    if p < 2:
        raise ValueError("need p >= 2")
    if n_candidates < 1:
        raise ValueError("need n_candidates >= 1")
    b = _check_bounds(bounds)
    rng = np.random.default_rng(seed)
    best, best_score = None, -np.inf
    scores = np.empty(n_candidates)
    for k in range(n_candidates):
        cand = random_lhd(p, b.shape[0], rng)
        scores[k] = min_distance(cand)
        if scores[k] > best_score:
            best, best_score = cand, scores[k]
    pts = b[:, 0] + best * (b[:, 1] - b[:, 0])
    design = DesignMatrix(pts, tuple(map(tuple, b)))
    return (design, scores) if return_scores else design


def expand_bounds(samples, margin: float = 0.25) -> tuple[tuple[float, float], ...]:
    """Per-axis sample range widened by ``margin`` of the range on each side.

    A degenerate axis (all values equal to c) widens to ``c * (1 -/+ margin)``.
    Lower bounds are floored at zero.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.size == 0:
        raise ValueError("need at least one sample")
    lo, hi = x.min(axis=0), x.max(axis=0)
    width = hi - lo
    width = np.where(width > 0, width, np.abs(lo))
    return tuple((max(0.0, float(l - margin * w)), float(h + margin * w))
                 for l, h, w in zip(lo, hi, width))


def write_design(path: str | Path, design: DesignMatrix, comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write("# bounds " + " ".join(f"{lo!r}:{hi!r}" for lo, hi in design.bounds) + "\n")
        w = csv.writer(fh)
        w.writerow(DESIGN_COLUMNS)
        for row in design.points:
            w.writerow([repr(float(v)) for v in row])


def read_design(path: str | Path) -> DesignMatrix:
    bounds = None
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("# bounds"):
                bounds = tuple(tuple(float(v) for v in tok.split(":")) for tok in line.split()[2:])
            elif line.startswith("#") or not line.strip():
                continue
            elif line.startswith(DESIGN_COLUMNS[0]):
                continue
            else:
                rows.append([float(v) for v in line.split(",")])
    pts = np.array(rows, dtype=float)
    if bounds is None:
        bounds = tuple(zip(pts.min(axis=0), pts.max(axis=0)))
    return DesignMatrix(pts, bounds)
