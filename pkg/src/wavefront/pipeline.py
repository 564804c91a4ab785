"""Pipeline stages with hash-checked resumability.

Every stage reads its inputs from the configured files or from earlier
stages' outputs under the work directory.  ``manifest.json`` records, per
stage, a key derived from the config hash, the seed and the hashes of all
inputs, together with the hashes of everything the stage wrote.  A stage is
skipped when its key matches and its recorded outputs are intact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import design as design_mod
from . import emulator as emu
from . import infer
from .config import PipelineConfig, parse_priors
from .data import SiteData, load_sites
from .front import ArrivalRecord, SimConfig, WaveParams, run_simulation
from .geo import (Environment, GeoPoint, ScalarField, VectorField, read_ascii_grid,
                  read_polylines, write_ascii_grid)

log = logging.getLogger(__name__)

STAGES = ("build-env", "design", "simulate", "train", "validate", "infer", "predict", "report")
MANIFEST = "manifest.json"
_SAFE_ID = re.compile(r"^[A-Za-z0-9_.-]+$")


class StageError(RuntimeError):
    def __init__(self, stage: str, artifact: Path | str, msg: str):
        super().__init__(f"stage {stage} failed ({artifact}): {msg}")
        self.stage = stage
        self.artifact = str(artifact)


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_seed(seed: int, stage: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])


def provenance(cfg: PipelineConfig) -> str:
    return f"config_hash={cfg.config_hash()} seed={cfg.seed}"


# ---------------------------------------------------------------------------
# shared loaders

def load_site_data(cfg: PipelineConfig) -> SiteData:
    recs = load_sites(cfg.path("sites"), cfg.sigma_floor)
    bad = [r.site_id for r in recs if not _SAFE_ID.match(r.site_id)]
    if bad:
        raise ValueError(f"site ids must match {_SAFE_ID.pattern}: {bad[:5]}")
    return SiteData.from_records(recs, cfg.start_bc)


def _env_dir(cfg) -> Path:
    return cfg.work / "env"


def load_environment(cfg: PipelineConfig) -> Environment:
    d = _env_dir(cfg)
    nu = read_ascii_grid(d / "nu_l.asc")
    fields = {k: read_ascii_grid(d / f"{k}.asc").values for k in ("coast_vx", "coast_vy", "river_vx", "river_vy")}
    return Environment(nu, VectorField(nu.spec, fields["coast_vx"], fields["coast_vy"]),
                       VectorField(nu.spec, fields["river_vx"], fields["river_vy"]))


def read_arrival_matrix(run_dir: Path, n_runs: int, site_ids) -> np.ndarray:
    out = np.full((n_runs, len(site_ids)), np.nan)
    for k in range(n_runs):
        rec = ArrivalRecord.read(run_dir / f"run_{k:04d}.csv")
        if tuple(rec.site_ids) != tuple(site_ids):
            raise ValueError(f"{run_dir / f'run_{k:04d}.csv'}: site list does not match the sites file")
        out[k] = np.where(rec.reached, rec.arrival, np.nan)
    return out


def _write_csv(path: Path, header, rows, cfg: PipelineConfig, comments=()) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {provenance(cfg)}\n")
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_json(path: Path, obj: dict, cfg: PipelineConfig) -> None:
    obj = dict(obj)
    obj["config_hash"] = cfg.config_hash()
    obj["seed"] = cfg.seed
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n")


# ---------------------------------------------------------------------------
# stages

def stage_build_env(cfg: PipelineConfig) -> list[Path]:
    alt = read_ascii_grid(cfg.path("altitude"))
    env = Environment.from_altitude(alt, read_polylines(cfg.path("coast")), read_polylines(cfg.path("river")))
    d = _env_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    items = {"nu_l": env.nu_l.values, "coast_vx": env.coast.vx, "coast_vy": env.coast.vy,
             "river_vx": env.river.vx, "river_vy": env.river.vy}
    for name, values in items.items():
        p = d / f"{name}.asc"
        write_ascii_grid(p, ScalarField(env.spec, values), fmt="%.17g", comments=[provenance(cfg)])
        out += [p, Path(str(p) + ".meta")]
    return out


def _design_paths(cfg):
    d = cfg.work / "design"
    return d / "train.csv", d / "holdout.csv"


def stage_design(cfg: PipelineConfig) -> list[Path]:
    train_p, hold_p = _design_paths(cfg)
    train_p.parent.mkdir(parents=True, exist_ok=True)
    s_train, s_hold = stage_seed(cfg.seed, "design").spawn(2)
    comments = [provenance(cfg)]
    design_mod.write_design(train_p, design_mod.lhd_maximin(cfg.p, cfg.bounds, cfg.n_candidates,
                                                            np.random.default_rng(s_train)), comments)
    design_mod.write_design(hold_p, design_mod.lhd_maximin(cfg.p_star, cfg.bounds, cfg.n_candidates,
                                                           np.random.default_rng(s_hold)), comments)
    return [train_p, hold_p]


def _sim_config(cfg: PipelineConfig, env: Environment, data: SiteData) -> SimConfig:
    return SimConfig(source=GeoPoint(cfg.source_lon, cfg.source_lat), start_radius=cfg.start_radius,
                     dt=cfg.dt, t_max=cfg.t_max, delta_deg=env.spec.cell_size,
                     record_sites=tuple(GeoPoint(float(lo), float(la)) for lo, la in data.coords))


def simulate_one(env: Environment, sim: SimConfig, theta, gamma: float, site_ids) -> ArrivalRecord:
    params = WaveParams(float(theta[0]), float(theta[1]), float(theta[2]), gamma)
    return run_simulation(env, params, sim, site_ids=site_ids)


def stage_simulate(cfg: PipelineConfig) -> list[Path]:
    env = load_environment(cfg)
    data = load_site_data(cfg)
    sim = _sim_config(cfg, env, data)
    out = []
    for label, path in zip(("train", "holdout"), _design_paths(cfg)):
        pts = design_mod.read_design(path).points
        run_dir = cfg.work / "runs" / label
        run_dir.mkdir(parents=True, exist_ok=True)
        if cfg.threads > 1:
            from joblib import Parallel, delayed
            recs = Parallel(n_jobs=cfg.threads)(
                delayed(simulate_one)(env, sim, th, cfg.gamma, data.site_ids) for th in pts)
        else:
            recs = [simulate_one(env, sim, th, cfg.gamma, data.site_ids) for th in pts]
        for k, (th, rec) in enumerate(zip(pts, recs)):
            p = run_dir / f"run_{k:04d}.csv"
            rec.write(p, [provenance(cfg), "theta=" + ",".join(repr(float(v)) for v in th)])
            meta = {key: v for key, v in rec.meta.items() if key != "wall_time_s"}
            meta.update(config_hash=cfg.config_hash(), seed=cfg.seed)
            ArrivalRecord(rec.site_ids, rec.arrival, rec.reached, meta).write_meta(p.with_suffix(".json"))
            out += [p, p.with_suffix(".json")]
    return out


def _emu_dir(cfg) -> Path:
    return cfg.work / "emulators"


def stage_train(cfg: PipelineConfig) -> list[Path]:
    data = load_site_data(cfg)
    pts = design_mod.read_design(_design_paths(cfg)[0]).points
    arr = read_arrival_matrix(cfg.work / "runs" / "train", len(pts), data.site_ids)
    mh = emu.HyperMHConfig(n_iter=cfg.emu_n_iter, burn_in=cfg.emu_burn_in, thin=cfg.emu_thin)
    prior = emu.HyperPrior.reading(cfg.hyper_var_reading)
    ems = emu.train_all(data.site_ids, pts, arr, prior, mh, seed=stage_seed(cfg.seed, "train"),
                        n_jobs=cfg.threads)
    d = _emu_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for e in ems:
        p = d / f"{e.site_id}.emu.json"
        e.save(p, {"config_hash": cfg.config_hash(), "seed": cfg.seed})
        out.append(p)
    return out


def stage_validate(cfg: PipelineConfig) -> list[Path]:
    data = load_site_data(cfg)
    ems = emu.load_emulators(_emu_dir(cfg), data.site_ids)
    pts = design_mod.read_design(_design_paths(cfg)[1]).points
    arr = read_arrival_matrix(cfg.work / "runs" / "holdout", len(pts), data.site_ids)
    rows, pits = [], []
    for s, e in enumerate(ems):
        ok = np.isfinite(arr[:, s])
        md = emu.validate_md(e, pts[ok], arr[ok, s])
        if ok.sum() >= 20:
            pit = emu.validate_pit(e, pts[ok], arr[ok, s])
            pits.append(pit.pit)
            chi2, chi2_thr, passed = pit.chi2, pit.threshold, md.passed and pit.passed
        else:
            chi2, chi2_thr, passed = float("nan"), float("nan"), md.passed
        rows.append([e.site_id, md.md, md.threshold, chi2, chi2_thr, int(passed)])
    d = cfg.work / "validation"
    d.mkdir(parents=True, exist_ok=True)
    p1 = d / "validation.csv"
    _write_csv(p1, ("site_id", "md", "md_threshold", "chi2", "chi2_threshold", "pass"), rows, cfg)
    counts = np.bincount(np.minimum((np.concatenate(pits) * 10).astype(int), 9), minlength=10) if pits \
        else np.zeros(10, dtype=int)
    p2 = d / "pit_histogram.csv"
    _write_csv(p2, ("bin_lo", "bin_hi", "count"),
               [(k / 10, (k + 1) / 10, int(c)) for k, c in enumerate(counts)], cfg)
    return [p1, p2]


def _posterior_dir(cfg) -> Path:
    return cfg.work / "posterior"


def _likelihood(cfg, data, ems) -> infer.EmulatedLikelihood:
    uncertain = cfg.hyper_mode != "fixed"
    return infer.EmulatedLikelihood.from_emulators(data, ems, cfg.n_components, uncertain)


def _mh_config(cfg) -> infer.MHConfig:
    return infer.MHConfig(n_iter=cfg.mh_n_iter, burn_in=cfg.mh_burn_in, thin=cfg.mh_thin,
                          pilot_iter=cfg.mh_pilot, theta_bounds=tuple(cfg.bounds))


def stage_infer(cfg: PipelineConfig) -> list[Path]:
    data = load_site_data(cfg)
    ems = emu.load_emulators(_emu_dir(cfg), data.site_ids)
    lik = _likelihood(cfg, data, ems)
    priors = parse_priors(cfg.prior_overrides)
    seed = int(stage_seed(cfg.seed, "infer").generate_state(1)[0])
    if cfg.hyper_mode == "fixed":
        chain = infer.mh_sample(data, lik, priors, config=_mh_config(cfg), seed=seed)
    else:
        chain = infer.mh_sample_hyper_uncertain(data, lik, priors, config=_mh_config(cfg), seed=seed,
                                                mixture=cfg.hyper_mode == "mixture")
    d = _posterior_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    p1, p2, p3 = d / "samples.csv", d / "summary.json", d / "hyper_index.csv"
    chain.write_csv(p1, [provenance(cfg)])
    summ = chain.summary()
    summ["proposal_cov"] = chain.proposal_cov
    _write_json(p2, summ, cfg)
    _write_csv(p3, ("iter", "hyper_index"), zip(chain.iterations, chain.hyper_index), cfg)
    return [p1, p2, p3]


def load_chain(cfg: PipelineConfig) -> infer.PosteriorChain:
    d = _posterior_dir(cfg)
    chain = infer.PosteriorChain.read_csv(d / "samples.csv")
    with open(d / "hyper_index.csv") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    chain.hyper_index = np.array([int(r["hyper_index"]) for r in rows], dtype=int)
    chain.mode = cfg.hyper_mode
    return chain


def _predictive(cfg, data, ems, chain):
    lik = _likelihood(cfg, data, ems)
    s_pred, s_zeta = stage_seed(cfg.seed, "predict").spawn(2)
    pred = infer.predictive(chain, data, lik, seed=np.random.default_rng(s_pred), max_draws=cfg.predict_draws)
    zeta = infer.posterior_zeta(chain, data, lik, seed=np.random.default_rng(s_zeta), max_draws=cfg.predict_draws)
    return pred, zeta


def stage_predict(cfg: PipelineConfig) -> list[Path]:
    data = load_site_data(cfg)
    ems = emu.load_emulators(_emu_dir(cfg), data.site_ids)
    pred, zeta = _predictive(cfg, data, ems, load_chain(cfg))
    s = pred.summary()
    zm, zs = zeta.summary()
    d = cfg.work / "predict"
    d.mkdir(parents=True, exist_ok=True)
    p1, p2 = d / "predictive.csv", d / "zeta.csv"
    _write_csv(p1, ("site_id", "lon", "lat", "t_obs", "mean", "sd", "lo95", "hi95"),
               [(sid, float(c[0]), float(c[1]), float(t), float(m), float(sd), float(lo), float(hi))
                for sid, c, t, m, sd, lo, hi in zip(data.site_ids, data.coords, data.t, s["mean"], s["sd"],
                                                    s["lo95"], s["hi95"])],
               cfg, ["times are years elapsed since the source date"])
    _write_csv(p2, ("site_id", "mean", "sd"),
               [(sid, float(m), float(v)) for sid, m, v in zip(data.site_ids, zm, zs)], cfg)
    return [p1, p2]


def stage_report(cfg: PipelineConfig) -> list[Path]:
    from . import report
    return report.build_report(cfg)


@dataclass(frozen=True)
class Stage:
    name: str
    run: Callable[[PipelineConfig], list[Path]]
    inputs: Callable[[PipelineConfig], list[Path]]


def _glob(d: Path, pattern: str) -> list[Path]:
    return sorted(d.glob(pattern)) if d.exists() else []


def _inputs(name: str, cfg: PipelineConfig) -> list[Path]:
    w = cfg.work
    env = _glob(w / "env", "*.asc")
    des = list(_design_paths(cfg))
    emus = _glob(_emu_dir(cfg), "*.emu.json")
    post = _glob(_posterior_dir(cfg), "*.csv")
    table = {
        "build-env": [cfg.path("altitude"), cfg.path("coast"), cfg.path("river")],
        "design": [],
        "simulate": env + des + [cfg.path("sites")],
        "train": [des[0], cfg.path("sites")] + _glob(w / "runs" / "train", "*.csv"),
        "validate": [des[1], cfg.path("sites")] + emus + _glob(w / "runs" / "holdout", "*.csv"),
        "infer": [cfg.path("sites")] + emus,
        "predict": [cfg.path("sites")] + emus + post,
        "report": [cfg.path("sites")] + emus + post + _glob(w / "predict", "*.csv") + env,
    }
    return table[name]


STAGE_FUNCS = {
    "build-env": stage_build_env, "design": stage_design, "simulate": stage_simulate,
    "train": stage_train, "validate": stage_validate, "infer": stage_infer,
    "predict": stage_predict, "report": stage_report,
}


def _rel(cfg, p: Path) -> str:
    """Path relative to the work directory, else to the config directory, so moved projects stay valid."""
    p = Path(p).resolve()
    for root in (cfg.work, Path(cfg.base_dir)):
        try:
            return str(p.relative_to(root.resolve()))
        except ValueError:
            pass
    return str(p)


def _read_manifest(cfg) -> dict:
    p = cfg.work / MANIFEST
    if not p.exists():
        return {}
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError:
        log.warning("unreadable manifest %s; all stages will rerun", p)
        return {}


def stage_key(name: str, cfg: PipelineConfig) -> str:
    ins = {}
    for p in _inputs(name, cfg):
        if not Path(p).exists():
            raise StageError(name, p, "missing input")
        ins[_rel(cfg, p)] = file_hash(Path(p))
    blob = json.dumps({"stage": name, "config": cfg.config_hash(), "seed": cfg.seed, "inputs": ins},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _outputs_intact(cfg, entry: dict) -> bool:
    for rel, h in entry.get("outputs", {}).items():
        p = cfg.work / rel
        if not p.exists() or file_hash(p) != h:
            return False
    return bool(entry.get("outputs"))


def run_stage(name: str, cfg: PipelineConfig, force: bool = False) -> bool:
    """Run one stage unless it is up to date.  Returns True if it ran."""
    if name not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {name!r}")
    cfg.work.mkdir(parents=True, exist_ok=True)
    key = stage_key(name, cfg)
    manifest = _read_manifest(cfg)
    entry = manifest.get(name, {})
    if not force and entry.get("key") == key and _outputs_intact(cfg, entry):
        log.info("stage %s up to date; skipped", name)
        return False
    log.info("running stage %s", name)
    try:
        outputs = STAGE_FUNCS[name](cfg)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, cfg.work, f"{type(exc).__name__}: {exc}") from exc
    manifest = _read_manifest(cfg)
    manifest[name] = {"key": key, "outputs": {_rel(cfg, p): file_hash(Path(p)) for p in outputs}}
    (cfg.work / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return True


def run_pipeline(cfg: PipelineConfig, stages=STAGES, force: bool = False) -> dict[str, bool]:
    return {name: run_stage(name, cfg, force) for name in stages}
