"""Marker-particle wavefront propagation on the sphere.

The front is a closed chain of particles kept counter-clockwise as seen from
outside the sphere, so the outward normal is the rightward perpendicular of
the chain direction.  Each particle moves with velocity
``U n + V_C sgn(n.C) C + V_R sgn(n.R) R`` where ``U = 2 sqrt(gamma nu nu_L)``
and ``C``, ``R`` are the interpolated coast and river tangents.  Particles
are inserted where gaps exceed ``delta`` and removed where they fall below
``delta / 2``; close non-neighbouring particles trigger a reconnection that
cuts the chain into two loops, of which only the advancing one is kept.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geo import (
    DEFAULT_CELL_DEG,
    EARTH_RADIUS_KM,
    Environment,
    GeoPoint,
    arc_to_chord,
    bilinear,
    chord_to_arc_km,
    delta_km,
    destination,
    east_north_basis,
    great_circle_km,
    lonlat_to_xyz,
    xyz_to_lonlat,
)

log = logging.getLogger(__name__)

MIN_PARTICLES = 4
DEFAULT_SOURCE = GeoPoint(lon=37.1, lat=41.1)


class DegenerateFrontError(RuntimeError):
    pass


@dataclass(frozen=True)
class WaveParams:
    nu: float
    v_coast: float = 0.0
    v_river: float = 0.0
    gamma: float = 0.02

    def __post_init__(self):
        if not (self.nu > 0 and self.gamma > 0):
            raise ValueError("nu and gamma must be positive")
        if self.v_coast < 0 or self.v_river < 0:
            raise ValueError("advection speeds must be non-negative")

    def front_speed(self, nu_l=1.0):
        """Background normal speed ``2 sqrt(gamma nu nu_L)`` in km/year."""
        return 2.0 * np.sqrt(self.gamma * self.nu * np.maximum(nu_l, 0.0))


@dataclass(frozen=True)
class SimConfig:
    source: GeoPoint = DEFAULT_SOURCE
    start_radius: float = 10.0
    n_init: int = 16
    dt: float | None = None
    t_max: float = 5000.0
    record_sites: tuple[GeoPoint, ...] = ()
    hit_radius: float | None = None
    delta_deg: float = DEFAULT_CELL_DEG
    dt_safety: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "record_sites", tuple(self.record_sites))
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_max > (self.dt or 0.0):
            raise ValueError("t_max must exceed dt")
        if not self.start_radius > 0:
            raise ValueError("start_radius must be positive")
        if self.hit_radius is not None and not self.hit_radius > 0:
            raise ValueError("hit_radius must be positive")
        if self.n_init < MIN_PARTICLES:
            raise ValueError(f"n_init must be at least {MIN_PARTICLES}")


@dataclass(eq=False)
class Front:
    xyz: np.ndarray
    frozen: np.ndarray = None
    delta_deg: float = DEFAULT_CELL_DEG

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=float)
        self.xyz = self.xyz / np.linalg.norm(self.xyz, axis=1, keepdims=True)
        if self.frozen is None:
            self.frozen = np.zeros(len(self.xyz), dtype=bool)
        if len(self.xyz) < MIN_PARTICLES:
            raise DegenerateFrontError(f"front needs at least {MIN_PARTICLES} particles")

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @classmethod
    def from_lonlat(cls, lon, lat, delta_deg: float = DEFAULT_CELL_DEG) -> "Front":
        return cls(lonlat_to_xyz(lon, lat), delta_deg=delta_deg)

    @property
    def lonlat(self) -> tuple[np.ndarray, np.ndarray]:
        return xyz_to_lonlat(self.xyz)

    def gaps_km(self) -> np.ndarray:
        """Arc length from particle i to particle i+1 (cyclic)."""
        chord = np.linalg.norm(np.roll(self.xyz, -1, axis=0) - self.xyz, axis=1)
        return chord_to_arc_km(chord)

    def gap_delta_km(self) -> np.ndarray:
        """Local spacing target for each gap, evaluated at the gap midpoint latitude."""
        mid = self.xyz + np.roll(self.xyz, -1, axis=0)
        z = mid[:, 2] / np.linalg.norm(mid, axis=1)
        return delta_km(self.delta_deg, np.degrees(np.arcsin(np.clip(z, -1, 1))))

    def length_km(self) -> float:
        return float(self.gaps_km().sum())

    def copy(self) -> "Front":
        return Front(self.xyz.copy(), self.frozen.copy(), self.delta_deg)


# ---------------------------------------------------------------------------
# geometry

def orientation(xyz: np.ndarray) -> float:
    """Positive for a loop that is counter-clockwise seen from outside the sphere."""
    c = xyz.mean(axis=0)
    c /= np.linalg.norm(c)
    return float(np.cross(xyz, np.roll(xyz, -1, axis=0)).sum(axis=0) @ c)


def ensure_ccw(front: Front) -> Front:
    if orientation(front.xyz) < 0:
        return Front(front.xyz[::-1].copy(), front.frozen[::-1].copy(), front.delta_deg)
    return front


def init_front(config: SimConfig, env: Environment | None = None) -> Front:
    """``n_init`` particles on a small circle of ``start_radius`` km around the source."""
    src = config.source
    if env is not None and not env.spec.contains(src.lon, src.lat):
        raise ValueError(f"source ({src.lon}, {src.lat}) lies outside the grid")
    bearings = np.arange(config.n_init) * 360.0 / config.n_init
    lon, lat = destination(src.lon, src.lat, bearings, config.start_radius)
    front = Front.from_lonlat(lon, lat, config.delta_deg)
    if env is not None and not np.all(env.spec.contains(*front.lonlat)):
        raise ValueError("initial front extends outside the grid")
    return ensure_ccw(front)


def normals(front: Front) -> np.ndarray:
    """Unit outward normals (N, 3) in each particle's tangent plane.

    The normal is perpendicular to the chord joining the two neighbours.
    """
    P = front.xyz
    t = np.roll(P, -1, axis=0) - np.roll(P, 1, axis=0)
    t -= np.einsum("ij,ij->i", t, P)[:, None] * P
    n = np.cross(t, P)
    norm = np.linalg.norm(n, axis=1)
    if np.any(norm < 1e-14):
        raise DegenerateFrontError("coincident neighbours make the normal undefined")
    return n / norm[:, None]


def _normals_safe(front: Front) -> tuple[Front, np.ndarray]:
    try:
        return front, normals(front)
    except DegenerateFrontError:
        front = resample(front)
        return front, normals(front)


def velocities(front: Front, env: Environment, params: WaveParams,
               n_hat: np.ndarray | None = None) -> np.ndarray:
    """Particle velocities (N, 3) in km/year, tangent to the sphere.

    Frozen particles get zero velocity.
    """
    P = front.xyz
    n_hat = normals(front) if n_hat is None else n_hat
    lon, lat = xyz_to_lonlat(P)
    east, north = east_north_basis(P)
    u = params.front_speed(bilinear(env.nu_l, lon, lat))[:, None] * n_hat
    for speed, fld in ((params.v_coast, env.coast), (params.v_river, env.river)):
        if speed == 0:
            continue
        vx, vy = bilinear(fld, lon, lat)
        vhat = vx[:, None] * east + vy[:, None] * north
        sgn = np.sign(np.einsum("ij,ij->i", n_hat, vhat))
        u = u + speed * sgn[:, None] * vhat
    u[front.frozen] = 0.0
    return u


def _move(P: np.ndarray, disp_km: np.ndarray) -> np.ndarray:
    """Move unit vectors along great circles by tangent displacements in km."""
    dist = np.linalg.norm(disp_km, axis=1)
    ang = dist / EARTH_RADIUS_KM
    safe = np.where(dist > 0, dist, 1.0)
    direction = disp_km / safe[:, None]
    out = np.cos(ang)[:, None] * P + np.sin(ang)[:, None] * direction
    out[dist == 0] = P[dist == 0]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def step(front: Front, env: Environment, params: WaveParams, dt: float,
         u: np.ndarray | None = None) -> Front:
    """Advance every particle by ``u dt``; particles that would leave the grid freeze."""
    if u is None:
        u = velocities(front, env, params)
    new = _move(front.xyz, u * dt)
    lon, lat = xyz_to_lonlat(new)
    outside = ~env.spec.contains(lon, lat)
    frozen = front.frozen | outside
    new[outside] = front.xyz[outside]
    return Front(new, frozen, front.delta_deg)


# ---------------------------------------------------------------------------
# resampling and reconnection

def _slerp_fill(a: np.ndarray, b: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Interior points splitting each great-circle arc a->b into k equal pieces."""
    rep = k - 1
    a_r = np.repeat(a, rep, axis=0)
    b_r = np.repeat(b, rep, axis=0)
    frac = np.concatenate([np.arange(1, kk) / kk for kk in k]) if rep.sum() else np.zeros(0)
    omega = np.arccos(np.clip(np.einsum("ij,ij->i", a_r, b_r), -1, 1))
    s = np.sin(omega)
    s = np.where(s < 1e-15, 1e-15, s)
    w1 = np.sin((1 - frac) * omega) / s
    w2 = np.sin(frac * omega) / s
    out = w1[:, None] * a_r + w2[:, None] * b_r
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _remove_close(front: Front) -> Front:
    xyz, frozen = front.xyz, front.frozen
    for _ in range(64):
        f = Front(xyz, frozen, front.delta_deg)
        short = f.gaps_km() < 0.5 * f.gap_delta_km()
        if not short.any():
            break
        n = len(xyz)
        # drop the second particle of each short gap; within runs of
        # consecutive short gaps only every other one, so survivors stay linked
        drop = np.zeros(n, dtype=bool)
        run = 0
        start = int(np.argmin(short)) if not short.all() else 0
        for off in range(n):
            i = (start + off) % n
            if short[i]:
                if run % 2 == 0:
                    drop[(i + 1) % n] = True
                run += 1
            else:
                run = 0
        n_keep = n - int(drop.sum())
        if n_keep < MIN_PARTICLES:
            warnings.warn("particle removal would leave fewer than 4 particles; keeping 4",
                          RuntimeWarning, stacklevel=3)
            idx = np.flatnonzero(drop)[: n - MIN_PARTICLES]
            drop[:] = False
            drop[idx] = True
            if not drop.any():
                break
        xyz, frozen = xyz[~drop], frozen[~drop]
    return Front(xyz, frozen, front.delta_deg)


def _insert_midpoints(front: Front) -> Front:
    gaps = front.gaps_km()
    target = front.gap_delta_km()
    k = np.where(gaps > target, np.ceil(gaps / target).astype(int), 1)
    if np.all(k == 1):
        return front
    nxt = np.roll(front.xyz, -1, axis=0)
    fill = _slerp_fill(front.xyz, nxt, k)
    owner = np.repeat(np.arange(len(front)), k - 1)
    order = np.argsort(np.concatenate([np.arange(len(front)), owner]), kind="stable")
    xyz = np.concatenate([front.xyz, fill])[order]
    frozen = np.concatenate([front.frozen, np.zeros(len(fill), dtype=bool)])[order]
    return Front(xyz, frozen, front.delta_deg)


def resample(front: Front) -> Front:
    """Remove particles closer than delta/2 to a neighbour, then split gaps over delta.

    Midpoints are great-circle points; a gap of length g > delta receives
    ``ceil(g / delta) - 1`` equally spaced new particles.
    """
    return _insert_midpoints(_remove_close(front))


def _close_pairs(front: Front, min_path_factor: float = 2.0) -> np.ndarray:
    """Non-neighbour particle pairs closer than delta, sorted by distance.

    Pairs count as neighbours when the shorter path along the chain between
    them is at most ``min_path_factor * delta``; on a smooth front such
    particles are always within delta of each other.
    """
    P = front.xyz
    n = len(P)
    lat = np.degrees(np.arcsin(np.clip(P[:, 2], -1, 1)))
    dk = delta_km(front.delta_deg, lat)
    tree = cKDTree(P)
    pairs = tree.query_pairs(float(arc_to_chord(dk.max())), output_type="ndarray")
    if len(pairs) == 0:
        return pairs
    i, j = pairs[:, 0], pairs[:, 1]
    swap = i > j
    i, j = np.where(swap, j, i), np.where(swap, i, j)
    d = chord_to_arc_km(np.linalg.norm(P[i] - P[j], axis=1))
    local = 0.5 * (dk[i] + dk[j])
    cum = np.concatenate([[0.0], np.cumsum(front.gaps_km())])
    along = cum[j] - cum[i]
    path = np.minimum(along, cum[-1] - along)
    keep = (d < local) & (path > min_path_factor * local) & (np.minimum(j - i, n - (j - i)) > 1)
    out = np.column_stack([i[keep], j[keep]])
    return out[np.argsort(d[keep], kind="stable")]


def reconnect(front: Front, source: GeoPoint, return_count: bool = False,
              max_splits: int = 10000):
    """Short-circuit almost-closed loops and discard the excised pieces.

    For each close non-neighbour pair (i, j) the chain is cut into
    ``i+1..j`` and ``j+1..i``; the piece holding the particle farthest from
    the source survives (unless it is too small to be a loop).
    """
    src = lonlat_to_xyz(source.lon, source.lat)
    excised = 0
    for _ in range(max_splits):
        pairs = _close_pairs(front)
        if len(pairs) == 0:
            break
        i, j = (int(v) for v in pairs[0])
        a = np.arange(i + 1, j + 1)
        b = np.concatenate([np.arange(j + 1, len(front)), np.arange(0, i + 1)])
        far = int(np.argmax(-(front.xyz @ src)))
        keep, drop = (a, b) if far in set(a.tolist()) else (b, a)
        if len(keep) < MIN_PARTICLES:
            keep, drop = drop, keep
        if len(keep) < MIN_PARTICLES:
            break
        front = Front(front.xyz[keep], front.frozen[keep], front.delta_deg)
        excised += 1
    if excised:
        front = ensure_ccw(front)
    return (front, excised) if return_count else front


# ---------------------------------------------------------------------------
# simulation driver

@dataclass(eq=False)
class ArrivalRecord:
    site_ids: tuple[str, ...]
    arrival: np.ndarray
    reached: np.ndarray
    meta: dict = field(default_factory=dict)

    def write(self, path: str | Path, comments: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            w = csv.writer(fh)
            w.writerow(["site_id", "arrival_years", "reached"])
            for sid, t, r in zip(self.site_ids, self.arrival, self.reached):
                w.writerow([sid, repr(float(t)) if r else "nan", int(bool(r))])

    def write_meta(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.meta, indent=2, sort_keys=True, default=float) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "ArrivalRecord":
        ids, arr, reached = [], [], []
        with open(path, newline="") as fh:
            rows = csv.DictReader(line for line in fh if not line.startswith("#"))
            for row in rows:
                ids.append(row["site_id"])
                reached.append(bool(int(row["reached"])))
                arr.append(float(row["arrival_years"]))
        return cls(tuple(ids), np.array(arr), np.array(reached))


class _HitTracker:
    """First-passage times of the front over a set of sites.

    A site counts as reached once a particle lies within the hit radius and
    the site is behind that particle (non-positive offset along its normal).
    The passage time is interpolated linearly in that offset between the
    bracketing steps.
    """

    def __init__(self, sites: Sequence[GeoPoint], hit_radius: float | None, delta_deg: float):
        self.n = len(sites)
        lon = np.array([s.lon for s in sites], dtype=float)
        lat = np.array([s.lat for s in sites], dtype=float)
        self.lonlat = (lon, lat)
        self.xyz = lonlat_to_xyz(lon, lat).reshape(-1, 3)
        self.radius = (np.full(self.n, float(hit_radius)) if hit_radius is not None
                       else delta_km(delta_deg, lat))
        self.arrival = np.full(self.n, np.nan)
        self.reached = np.zeros(self.n, dtype=bool)
        self.prev_offset = np.full(self.n, np.nan)

    @property
    def done(self) -> bool:
        return self.n > 0 and bool(self.reached.all())

    def mark_inside(self, source: GeoPoint, radius: float, t0: float) -> None:
        lon, lat = self.lonlat
        inside = great_circle_km(lon, lat, source.lon, source.lat) <= radius
        self.arrival[inside] = t0
        self.reached |= inside

    def update(self, front: Front, n_hat: np.ndarray, t_prev: float, t_now: float) -> None:
        todo = np.flatnonzero(~self.reached)
        if len(todo) == 0:
            return
        tree = cKDTree(front.xyz)
        chord, idx = tree.query(self.xyz[todo])
        dist = chord_to_arc_km(chord)
        offset = EARTH_RADIUS_KM * np.einsum("ij,ij->i", self.xyz[todo] - front.xyz[idx], n_hat[idx])
        hit = (dist <= self.radius[todo]) & (offset <= 0)
        prev = self.prev_offset[todo]
        if hit.any():
            h = np.flatnonzero(hit)
            p, s = prev[h], offset[h]
            frac = np.where((p > 0) & np.isfinite(p), p / np.where(p - s > 0, p - s, 1.0), 1.0)
            self.arrival[todo[h]] = t_prev + np.clip(frac, 0.0, 1.0) * (t_now - t_prev)
            self.reached[todo[h]] = True
        self.prev_offset[todo] = offset


def run_simulation(env: Environment, params: WaveParams, config: SimConfig,
                   site_ids: Sequence[str] | None = None,
                   callback: Callable[[float, Front], None] | None = None,
                   max_steps: int = 2_000_000) -> ArrivalRecord:
    """Propagate the front from the source and record first arrival times.

    The clock starts at ``start_radius / U(source)``, the time a point
    source needs to reach the initial circle.  Sites never reached before
    ``t_max`` are flagged ``reached=False`` with a NaN arrival.
    """
    wall0 = time.perf_counter()
    spec = env.spec
    for s in config.record_sites:
        if not spec.contains(s.lon, s.lat):
            raise ValueError(f"site ({s.lon}, {s.lat}) outside the grid")
    front = init_front(config, env)
    u_src = float(params.front_speed(bilinear(env.nu_l, config.source)))
    t = config.start_radius / u_src if u_src > 0 else 0.0
    tracker = _HitTracker(config.record_sites, config.hit_radius, config.delta_deg)
    tracker.mark_inside(config.source, config.start_radius, t)
    excised = 0
    n_steps = 0
    dt_used = []
    if callback is not None:
        callback(t, front)
    while t < config.t_max and not tracker.done and n_steps < max_steps:
        front, n_hat = _normals_safe(front)
        u = velocities(front, env, params, n_hat)
        speed = np.linalg.norm(u, axis=1)
        u_max = float(speed.max())
        if u_max <= 0:
            log.info("front is static at t=%.2f; stopping", t)
            break
        lat = np.degrees(np.arcsin(np.clip(front.xyz[:, 2], -1, 1)))
        dt_stable = config.dt_safety * float(delta_km(config.delta_deg, lat).min()) / u_max
        if config.dt is None:
            dt = dt_stable
        else:
            dt = config.dt
            if dt > 2 * dt_stable and n_steps == 0:
                warnings.warn(f"dt={dt} exceeds the stability bound {dt_stable:.3g}", RuntimeWarning)
        dt = min(dt, config.t_max - t)
        front = step(front, env, params, dt, u)
        front = resample(front)
        front, k = reconnect(front, config.source, return_count=True)
        excised += k
        t_prev, t = t, t + dt
        n_steps += 1
        dt_used.append(dt)
        front, n_hat = _normals_safe(front)
        tracker.update(front, n_hat, t_prev, t)
        if callback is not None:
            callback(t, front)

    meta = {
        "params": asdict(params),
        "n_steps": n_steps,
        "t_end": t,
        "dt_min": float(min(dt_used)) if dt_used else None,
        "dt_max": float(max(dt_used)) if dt_used else None,
        "excised_loops": excised,
        "frozen_particles": int(front.frozen.sum()),
        "final_particles": len(front),
        "wall_time_s": time.perf_counter() - wall0,
    }
    ids = tuple(site_ids) if site_ids is not None else tuple(str(i) for i in range(tracker.n))
    arrival = np.where(tracker.reached, tracker.arrival, np.nan)
    return ArrivalRecord(ids, arrival, tracker.reached.copy(), meta)


def mean_radius_km(front: Front, source: GeoPoint) -> tuple[float, float]:
    """Mean and coefficient of variation of particle distances from ``source``."""
    lon, lat = front.lonlat
    d = great_circle_km(lon, lat, source.lon, source.lat)
    return float(d.mean()), float(d.std() / d.mean())
