"""Synthetic terrain, site sets, arrival functions and datasets for testing and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatedSample, SiteData, SiteRecord, to_bc
from .emulator import mean_basis
from .geo import GeoPoint, great_circle_km
from .gp import KernelParams, gauss_kernel
from .infer import ModelParams, site_sqdist, zeta_cov

THETA_STAR = (20.0, 0.3, 0.2)


@dataclass(frozen=True, eq=False)
class AnalyticArrivals:
    """Closed-form arrival times ``d_i / (2 sqrt(gamma nu) + c_i v_coast + rho_i v_river)``.

    ``d`` are source distances in km; ``c`` and ``rho`` in [0, 1] are the
    fractions of each path along which coastal and river advection help.
    """

    site_ids: tuple[str, ...]
    coords: np.ndarray
    d: np.ndarray
    c: np.ndarray
    rho: np.ndarray
    gamma: float = 0.02

    def __call__(self, theta) -> np.ndarray:
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        speed = (2 * np.sqrt(self.gamma * th[:, :1]) + th[:, 1:2] * self.c[None, :]
                 + th[:, 2:3] * self.rho[None, :])
        out = self.d[None, :] / speed
        return out[0] if np.ndim(theta) == 1 else out


def random_sites(n: int, rng, source: GeoPoint = GeoPoint(37.1, 41.1),
                 lon_range=(-10.0, 30.0), lat_range=(36.0, 58.0), gamma: float = 0.02) -> AnalyticArrivals:
    """Sites scattered uniformly over a lon/lat box, with random advection exposure."""
    lon = rng.uniform(*lon_range, n)
    lat = rng.uniform(*lat_range, n)
    d = great_circle_km(source.lon, source.lat, lon, lat)
    c = rng.uniform(0.0, 1.0, n)
    rho = rng.uniform(0.0, 1.0, n)
    ids = tuple(f"S{k:03d}" for k in range(n))
    return AnalyticArrivals(ids, np.column_stack([lon, lat]), d, c, rho, gamma)


def simulate_dates(tau: np.ndarray, coords: np.ndarray, sigma_i: np.ndarray, p: ModelParams, rng) -> np.ndarray:
    """One draw of ``t = tau + zeta + sigma_i w + sigma e`` with ``zeta`` a GP over ``coords``."""
    n = len(tau)
    K = zeta_cov(site_sqdist(coords), p.a_zeta, p.r_zeta)
    w, v = np.linalg.eigh(K)
    zeta = v @ (np.sqrt(np.clip(w, 0, None)) * rng.standard_normal(n))
    return tau + zeta + sigma_i * rng.standard_normal(n) + p.sigma * rng.standard_normal(n)


def synthetic_dataset(arrivals: AnalyticArrivals, p: ModelParams, rng, sigma_range=(40.0, 160.0),
                      tau=None) -> SiteData:
    """Site summaries generated from the full hierarchical model at ``p``."""
    n = len(arrivals.site_ids)
    tau = arrivals(p.theta) if tau is None else np.asarray(tau, dtype=float)
    sigma_i = rng.uniform(*sigma_range, n)
    t = simulate_dates(tau, arrivals.coords, sigma_i, p, rng)
    return SiteData(arrivals.site_ids, arrivals.coords.copy(), t, sigma_i)


def dataset_records(data: SiteData) -> list[SiteRecord]:
    """Single-sample site records (calendar years BC) for writing a sites CSV."""
    out = []
    for sid, (lon, lat), t, s in zip(data.site_ids, data.coords, data.t, data.sigma):
        t_bc = float(to_bc(t, data.start_bc))
        out.append(SiteRecord(sid, GeoPoint(float(lon), float(lat)), (DatedSample(sid, t_bc, float(s)),),
                              t_bc, float(s), sid))
    return out


@dataclass(frozen=True, eq=False)
class GPTestFunction:
    """Arrival-like test function: basis mean plus a realisation of the emulator's own GP.

    Values are only available at the points supplied on construction
    (training then hold-out), which is all that emulator validation needs.
    """

    points: np.ndarray
    values: np.ndarray
    alpha: np.ndarray
    kernel: KernelParams

    @classmethod
    def draw(cls, points, alpha, kernel: KernelParams, rng, n_train: int | None = None) -> "GPTestFunction":
        """Draw values at ``points``.

        With ``n_train`` set, the GP part is conditioned on being orthogonal
        to the mean basis over the first ``n_train`` points, so an OLS fit on
        those points recovers ``alpha`` exactly.  Values at the remaining
        points are then exact GP conditionals given the training values.
        """
        pts = np.asarray(points, dtype=float)
        K = gauss_kernel(pts, pts, kernel)
        K[np.diag_indices_from(K)] += 1e-8 * kernel.amplitude**2
        L = np.linalg.cholesky(K)
        g = L @ rng.standard_normal(len(pts))
        if n_train is not None:
            H = mean_basis(pts[:n_train])
            A = K[:, :n_train] @ H
            g = g - A @ np.linalg.solve(H.T @ A[:n_train], H.T @ g[:n_train])
        vals = mean_basis(pts) @ np.asarray(alpha, dtype=float) + g
        return cls(pts, vals, np.asarray(alpha, dtype=float), kernel)


# ---------------------------------------------------------------------------
# end-to-end demo scenario

DEMO_GRID = dict(lon_min=0.0, lon_max=12.0, lat_min=40.0, lat_max=50.0, cell_size=1.0 / 6.0)
DEMO_SOURCE = GeoPoint(10.5, 41.5)
DEMO_BOUNDS = ((5.0, 60.0), (0.05, 1.5), (0.05, 1.0))


def write_scenario(out_dir, n_sites: int = 30, seed: int = 1, params: ModelParams | None = None,
                   design_size: int = 30, holdout_size: int = 10) -> dict:
    """Write terrain, polylines, a sites file and a desk-scale config for a small synthetic region.

    Site dates come from one front simulation at the generating parameters
    plus spatial, site-level and global noise drawn from the full model.
    """
    from pathlib import Path

    from .config import PipelineConfig, write_config
    from .data import write_sites
    from .front import SimConfig, WaveParams, run_simulation
    from .geo import Environment, GridSpec, Hill, straight_polyline, synthetic_altitude, write_ascii_grid
    from .geo import write_polylines

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    p = params or ModelParams(*THETA_STAR, sigma=100.0, a_zeta=30.0, r_zeta=3.0)
    spec = GridSpec(**DEMO_GRID)
    alt = synthetic_altitude(spec, hills=[Hill(6.0, 45.5, 1.6, 60.0), Hill(3.5, 42.5, 0.9, 40.0)],
                             sea_west_of=1.0)
    coast = [straight_polyline(GeoPoint(1.0, 40.2), GeoPoint(1.0, 49.8), 120)]
    river = [straight_polyline(GeoPoint(10.0, 43.0), GeoPoint(2.0, 48.5), 120)]
    write_ascii_grid(out / "terrain.asc", alt, fmt="%.6f")
    write_polylines(out / "coast.csv", coast, ["coast"])
    write_polylines(out / "river.csv", river, ["river"])

    env = Environment.from_altitude(alt, coast, river)
    lon = rng.uniform(1.6, 11.6, 4 * n_sites)
    lat = rng.uniform(40.4, 49.6, 4 * n_sites)
    far = great_circle_km(lon, lat, DEMO_SOURCE.lon, DEMO_SOURCE.lat) > 60.0
    lon, lat = lon[far][:n_sites], lat[far][:n_sites]
    ids = tuple(f"D{k:03d}" for k in range(len(lon)))
    sim = SimConfig(source=DEMO_SOURCE, start_radius=30.0, t_max=4000.0, delta_deg=spec.cell_size,
                    record_sites=tuple(GeoPoint(float(a), float(b)) for a, b in zip(lon, lat)))
    rec = run_simulation(env, WaveParams(p.nu, p.v_coast, p.v_river), sim, site_ids=ids)
    keep = rec.reached
    coords = np.column_stack([lon, lat])[keep]
    tau = rec.arrival[keep]
    sigma_i = rng.uniform(40.0, 160.0, len(tau))
    t = simulate_dates(tau, coords, sigma_i, p, rng)
    data = SiteData(tuple(np.array(ids)[keep]), coords, t, sigma_i)
    write_sites(out / "sites.csv", dataset_records(data),
                [f"synthetic sites; generating parameters {p}", f"seed={seed}"])

    cfg = PipelineConfig(source_lon=DEMO_SOURCE.lon, source_lat=DEMO_SOURCE.lat, start_radius=30.0,
                         t_max=4000.0, p=design_size, p_star=holdout_size, n_candidates=500,
                         bounds=DEMO_BOUNDS, emu_n_iter=3000, emu_burn_in=1000, emu_thin=10,
                         mh_n_iter=20_000, mh_burn_in=2_000, mh_thin=10, mh_pilot=2_000,
                         n_components=10, predict_draws=500, seed=seed)
    write_config(out / "config.ini", cfg)
    return {"params": p, "n_sites": int(keep.sum()), "tau": tau, "site_ids": data.site_ids}
