"""Plain-data report files: marginal densities, predictive densities and arrival maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from . import emulator as emu
from . import infer
from .geo import GridSpec, ScalarField, write_ascii_grid

N_GRID = 256
IDW_NEIGHBOURS = 8
IDW_POWER = 2.0


def marginal_curves(samples: np.ndarray, priors: infer.Priors = infer.Priors(), n: int = N_GRID):
    """Per parameter: (grid, posterior KDE, prior density) over the sample range widened by 10%."""
    out = {}
    for j, name in enumerate(infer.PARAM_NAMES):
        x = samples[:, j]
        lo, hi = np.quantile(x, [0.001, 0.999])
        pad = 0.1 * (hi - lo) if hi > lo else 0.1 * abs(hi) + 1e-9
        grid = np.linspace(max(lo - pad, 1e-12), hi + pad, n)
        post = stats.gaussian_kde(x)(grid) if np.ptp(x) > 0 else np.zeros(n)
        pts = np.tile(np.exp(np.log(priors.medians())), (n, 1))
        pts[:, j] = grid
        prior = np.exp(priors.marginal_logpdfs(pts)[:, j])
        out[name] = (grid, post, prior)
    return out


def idw(coords: np.ndarray, values: np.ndarray, qlon: np.ndarray, qlat: np.ndarray,
        k: int = IDW_NEIGHBOURS, power: float = IDW_POWER) -> np.ndarray:
    """Inverse-distance-weighted interpolation over the ``k`` nearest sites (degree distances)."""
    tree = cKDTree(coords)
    k = min(k, len(coords))
    q = np.column_stack([qlon.ravel(), qlat.ravel()])
    d, idx = tree.query(q, k=k)
    d = d.reshape(len(q), k)
    idx = idx.reshape(len(q), k)
    exact = d[:, 0] == 0
    w = 1.0 / np.where(d > 0, d, 1.0) ** power
    out = (w * values[idx]).sum(1) / w.sum(1)
    out[exact] = values[idx[exact, 0]]
    return out.reshape(qlon.shape)


def _report_sites(cfg, site_ids) -> list[str]:
    from .pipeline import stage_seed
    if cfg.report_sites:
        missing = [s for s in cfg.report_sites if s not in site_ids]
        if missing:
            raise ValueError(f"report sites not in data: {missing}")
        return list(cfg.report_sites)
    rng = np.random.default_rng(stage_seed(cfg.seed, "report"))
    k = min(4, len(site_ids))
    return [site_ids[i] for i in sorted(rng.choice(len(site_ids), k, replace=False))]


def build_report(cfg) -> list[Path]:
    from .config import parse_priors
    from .pipeline import (_predictive, _write_csv, _write_json, load_chain, load_environment,
                           load_site_data, provenance)
    work = cfg.work
    needed = [work / "posterior" / "samples.csv", work / "posterior" / "hyper_index.csv",
              work / "predict" / "predictive.csv", work / "env" / "nu_l.asc"]
    absent = [str(p) for p in needed if not p.exists()]
    if absent:
        raise FileNotFoundError("missing report inputs: " + ", ".join(absent))
    out_dir = work / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_site_data(cfg)
    chain = load_chain(cfg)
    outputs = []
    index = {"marginals": {}, "predictive": {}, "maps": {}}

    for name, (grid, post, prior) in marginal_curves(chain.samples, parse_priors(cfg.prior_overrides)).items():
        p = out_dir / f"marginal_{name}.csv"
        _write_csv(p, ("x", "posterior", "prior"), zip(grid, post, prior), cfg)
        outputs.append(p)
        index["marginals"][name] = p.name

    ems = emu.load_emulators(work / "emulators", data.site_ids)
    pred, _ = _predictive(cfg, data, ems, chain)
    for sid in _report_sites(cfg, list(data.site_ids)):
        s = data.site_ids.index(sid)
        m, sd = pred.means[:, s], np.sqrt(pred.variances[:, s])
        grid = np.linspace((m - 4 * sd).min(), (m + 4 * sd).max(), N_GRID)
        dens = pred.density(s, grid)
        p = out_dir / f"predictive_{sid}.csv"
        _write_csv(p, ("t_elapsed", "t_bc", "density"),
                   zip(grid, data.start_bc - grid, dens), cfg, [f"observed t_elapsed={data.t[s]!r}"])
        outputs.append(p)
        index["predictive"][sid] = p.name

    env_spec = load_environment(cfg).spec
    cell = cfg.report_cell or env_spec.cell_size
    spec = GridSpec(env_spec.lon_min, env_spec.lon_max, env_spec.lat_min, env_spec.lat_max, cell)
    lon, lat = spec.mesh()
    summ = pred.summary()
    for key, vals in (("mean_bc", data.start_bc - summ["mean"]), ("sd", summ["sd"])):
        grid_vals = idw(data.coords, np.asarray(vals), lon, lat)
        p = out_dir / f"map_{key}.asc"
        write_ascii_grid(p, ScalarField(spec, grid_vals), fmt="%.10g", comments=[provenance(cfg)])
        outputs += [p, Path(str(p) + ".meta")]
        index["maps"][key] = {"file": p.name, "shape": list(spec.shape)}

    p = out_dir / "index.json"
    _write_json(p, index, cfg)
    outputs.append(p)
    return outputs
