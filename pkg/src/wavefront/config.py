"""Pipeline configuration read from an INI-style file."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import DEFAULT_START_BC, DEFAULT_SOURCE
from .design import PAPER_BOUNDS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # paths (relative paths resolve against the config file's directory)
    altitude: str = "terrain.asc"
    coast: str = "coast.csv"
    river: str = "river.csv"
    sites: str = "sites.csv"
    work_dir: str = "work"
    # source and clock
    source_lon: float = DEFAULT_SOURCE.lon
    source_lat: float = DEFAULT_SOURCE.lat
    start_bc: float = DEFAULT_START_BC
    sigma_floor: float | None = None
    # simulator
    gamma: float = 0.02
    start_radius: float = 10.0
    t_max: float = 5000.0
    dt: float | None = None
    # design
    p: int = 200
    p_star: int = 100
    n_candidates: int = 5000
    bounds: tuple[tuple[float, float], ...] = PAPER_BOUNDS
    # emulator hyperparameter MCMC
    emu_n_iter: int = 50_000
    emu_burn_in: int = 5_000
    emu_thin: int = 10
    hyper_var_reading: str = "variance"
    # inference MCMC
    mh_n_iter: int = 100_000
    mh_burn_in: int = 10_000
    mh_thin: int = 10
    mh_pilot: int = 5_000
    hyper_mode: str = "fixed"
    prior_overrides: str = ""
    n_components: int = 20
    predict_draws: int = 2000
    # report
    report_sites: tuple[str, ...] = ()
    report_cell: float | None = None
    # run
    seed: int = 1
    scale: str = "desk"
    threads: int = 1
    base_dir: str = field(default=".", compare=False)

    def path(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def work(self) -> Path:
        return self.path("work_dir")

    def hashed_fields(self) -> dict:
        d = asdict(self)
        # run-control fields that do not change numeric results
        for k in ("base_dir", "threads", "seed"):
            d.pop(k)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_fields(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_scale(self, scale: str) -> "PipelineConfig":
        if scale == "paper":
            return replace(self, scale=scale, emu_n_iter=500_000, emu_burn_in=50_000, emu_thin=50,
                           mh_n_iter=1_000_000, mh_burn_in=100_000, mh_thin=100)
        if scale == "desk":
            return replace(self, scale=scale)
        raise ConfigError(f"unknown scale {scale!r}")

    def validate(self, check_files: bool = True) -> None:
        if self.p < 8 or self.p_star < 8:
            raise ConfigError("design sizes p and p_star must be at least 8")
        if self.hyper_mode not in ("fixed", "joint", "mixture"):
            raise ConfigError(f"hyper_mode must be fixed, joint or mixture, not {self.hyper_mode!r}")
        if self.hyper_var_reading not in ("variance", "sd"):
            raise ConfigError("hyper_var_reading must be 'variance' or 'sd'")
        if len(self.bounds) != 3 or any(lo >= hi or lo < 0 for lo, hi in self.bounds):
            raise ConfigError("bounds must be three non-negative (low, high) pairs")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        try:
            parse_priors(self.prior_overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if check_files:
            missing = [str(self.path(k)) for k in ("altitude", "coast", "river", "sites")
                       if not self.path(k).exists()]
            if missing:
                raise ConfigError(f"missing input files: {', '.join(missing)}")


_SECTIONS = {
    "paths": ("altitude", "coast", "river", "sites", "work_dir"),
    "source": ("source_lon", "source_lat", "start_bc", "sigma_floor"),
    "simulation": ("gamma", "start_radius", "t_max", "dt"),
    "design": ("p", "p_star", "n_candidates", "bounds"),
    "emulator": ("emu_n_iter", "emu_burn_in", "emu_thin", "hyper_var_reading"),
    "inference": ("mh_n_iter", "mh_burn_in", "mh_thin", "mh_pilot", "hyper_mode", "prior_overrides", "n_components",
                  "predict_draws"),
    "report": ("report_sites", "report_cell"),
    "run": ("seed", "scale", "threads"),
}


def _convert(name: str, raw: str):
    default = getattr(PipelineConfig, name, None)
    raw = raw.strip()
    if name == "bounds":
        try:
            return tuple(tuple(float(v) for v in tok.split(":")) for tok in raw.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"bounds: expected 'lo:hi lo:hi lo:hi', got {raw!r}") from None
    if name == "report_sites":
        return tuple(s for s in raw.replace(",", " ").split() if s)
    if name in ("sigma_floor", "dt", "report_cell"):
        return None if raw in ("", "none", "None") else float(raw)
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def load_config(path: str | Path | None, **overrides) -> PipelineConfig:
    values = {}
    base = "."
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        cp = configparser.ConfigParser()
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = str(path.parent)
        for section in cp.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in cp.items(section):
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                values[key] = _convert(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = PipelineConfig(base_dir=base, **values)
    if "scale" in values and values["scale"] == "paper":
        cfg = cfg.with_scale("paper")
    return cfg


def write_config(path: str | Path, cfg: PipelineConfig) -> None:
    cp = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        cp[section] = {}
        for k in keys:
            v = getattr(cfg, k)
            if k == "bounds":
                v = " ".join(f"{lo!r}:{hi!r}" for lo, hi in v)
            elif k == "report_sites":
                v = " ".join(v)
            elif v is None:
                v = ""
            cp[section][k] = str(v)
    with open(path, "w") as fh:
        cp.write(fh)


def parse_priors(spec: str):
    """Priors with overrides such as ``"nu=3.5:1 sigma2=5:1e6"`` (log-normal mean:variance, IG shape:scale)."""
    from .infer import InverseGamma, LogNormal, Priors

    kw = {}
    for tok in spec.replace(",", " ").split():
        name, _, val = tok.partition("=")
        try:
            a, b = (float(v) for v in val.split(":"))
        except ValueError:
            raise ValueError(f"prior override {tok!r}: expected name=a:b") from None
        if name == "sigma2":
            kw[name] = InverseGamma(a, b)
        elif name in ("nu", "v_coast", "v_river", "a_zeta", "r_zeta"):
            if b <= 0:
                raise ValueError(f"prior override {tok!r}: variance must be positive")
            kw[name] = LogNormal(a, b)
        else:
            raise ValueError(f"prior override {tok!r}: unknown parameter {name!r}")
    return Priors(**kw)
