"""Gridded geographic environment: altitude rasters, diffusivity, tangent fields.

Fields are stored south-to-north (row 0 is the southernmost row of cell
centres) and west-to-east.  ESRI-ASCII files are north-to-south on disk; the
flip happens in :func:`read_ascii_grid` / :func:`write_ascii_grid`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

EARTH_RADIUS_KM = 6371.0
DEFAULT_CELL_DEG = 1.0 / 15.0  # 4 arc-minutes

COAST_DECAY_KM = 10.0
TANGENT_DECAY_KM = 15.0
TANGENT_MIN_NORM = 1e-6


class OutOfDomainError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float


@dataclass(frozen=True)
class GridSpec:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    cell_size: float = DEFAULT_CELL_DEG

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if not self.lon_min < self.lon_max:
            raise ValueError("lon_min must be < lon_max")
        if not self.lat_min < self.lat_max:
            raise ValueError("lat_min must be < lat_max")
        if not (-90 < self.lat_min and self.lat_max < 90):
            raise ValueError("latitude bounds must lie strictly inside (-90, 90)")
        if self.n_lon < 2 or self.n_lat < 2:
            raise ValueError("grid needs at least 2 cells per axis")

    @property
    def n_lon(self) -> int:
        return int(round((self.lon_max - self.lon_min) / self.cell_size))

    @property
    def n_lat(self) -> int:
        return int(round((self.lat_max - self.lat_min) / self.cell_size))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def lons(self) -> np.ndarray:
        """Cell-centre longitudes, west to east."""
        return self.lon_min + (np.arange(self.n_lon) + 0.5) * self.cell_size

    @property
    def lats(self) -> np.ndarray:
        """Cell-centre latitudes, south to north."""
        return self.lat_min + (np.arange(self.n_lat) + 0.5) * self.cell_size

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.lons, self.lats)

    def contains(self, lon, lat) -> np.ndarray | bool:
        lon = np.asarray(lon)
        lat = np.asarray(lat)
        inside = ((lon >= self.lon_min) & (lon <= self.lon_max)
                  & (lat >= self.lat_min) & (lat <= self.lat_max))
        return inside if inside.ndim else bool(inside)


@dataclass(frozen=True, eq=False)
class ScalarField:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.spec.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.spec.shape}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class VectorField:
    """East/north components of a unit-or-zero tangent field."""

    spec: GridSpec
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        for name in ("vx", "vy"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != self.spec.shape:
                raise ValueError(f"{name} shape {arr.shape} does not match grid {self.spec.shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, spec: GridSpec) -> "VectorField":
        return cls(spec, np.zeros(spec.shape), np.zeros(spec.shape))


# ---------------------------------------------------------------------------
# spherical geometry

def great_circle_km(lon1, lat1, lon2, lat2, radius: float = EARTH_RADIUS_KM):
    """Haversine distance in km; broadcasts over array arguments."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=float))
                              for v in (lon1, lat1, lon2, lat2))
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    d = 2 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return d if d.ndim else float(d)


def distance_km(p1: GeoPoint, p2: GeoPoint) -> float:
    return great_circle_km(p1.lon, p1.lat, p2.lon, p2.lat)


def lonlat_to_xyz(lon, lat) -> np.ndarray:
    lon = np.radians(np.asarray(lon, dtype=float))
    lat = np.radians(np.asarray(lat, dtype=float))
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def xyz_to_lonlat(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xyz = np.asarray(xyz, dtype=float)
    lon = np.degrees(np.arctan2(xyz[..., 1], xyz[..., 0]))
    lat = np.degrees(np.arcsin(np.clip(xyz[..., 2] / np.linalg.norm(xyz, axis=-1), -1, 1)))
    return lon, lat


def east_north_basis(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Local unit east and north vectors at unit positions ``xyz`` (N, 3)."""
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    rho = np.hypot(x, y)
    rho = np.where(rho < 1e-15, 1e-15, rho)
    east = np.stack([-y / rho, x / rho, np.zeros_like(x)], axis=-1)
    north = np.stack([-z * x / rho, -z * y / rho, rho], axis=-1)
    return east, north


def chord_to_arc_km(chord, radius: float = EARTH_RADIUS_KM):
    """Arc length for a chord measured between unit vectors."""
    return 2 * radius * np.arcsin(np.clip(np.asarray(chord) / 2, 0.0, 1.0))


def arc_to_chord(arc_km, radius: float = EARTH_RADIUS_KM):
    return 2 * np.sin(np.minimum(np.asarray(arc_km) / (2 * radius), np.pi / 2))


def destination(lon: float, lat: float, bearing_deg, distance: float,
                radius: float = EARTH_RADIUS_KM):
    """Point reached from (lon, lat) after ``distance`` km along ``bearing_deg``."""
    phi1 = math.radians(lat)
    lam1 = math.radians(lon)
    brg = np.radians(np.asarray(bearing_deg, dtype=float))
    ang = distance / radius
    phi2 = np.arcsin(np.sin(phi1) * np.cos(ang) + np.cos(phi1) * np.sin(ang) * np.cos(brg))
    lam2 = lam1 + np.arctan2(np.sin(brg) * np.sin(ang) * np.cos(phi1),
                             np.cos(ang) - np.sin(phi1) * np.sin(phi2))
    return np.degrees(lam2), np.degrees(phi2)


def delta_km(delta_deg: float, lat) -> np.ndarray:
    """Length in km of ``delta_deg`` of longitude at latitude ``lat``."""
    return np.radians(delta_deg) * EARTH_RADIUS_KM * np.cos(np.radians(lat))


# ---------------------------------------------------------------------------
# interpolation

def _fractional_index(spec: GridSpec, lon, lat):
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if not np.all(spec.contains(lon, lat)):
        raise OutOfDomainError("point outside grid bounds")
    fx = np.clip((lon - spec.lon_min) / spec.cell_size - 0.5, 0.0, spec.n_lon - 1)
    fy = np.clip((lat - spec.lat_min) / spec.cell_size - 0.5, 0.0, spec.n_lat - 1)
    ix = np.minimum(np.floor(fx).astype(int), spec.n_lon - 2)
    iy = np.minimum(np.floor(fy).astype(int), spec.n_lat - 2)
    return ix, iy, fx - ix, fy - iy


def _bilinear_array(values, ix, iy, tx, ty):
    return (values[iy, ix] * (1 - tx) * (1 - ty)
            + values[iy, ix + 1] * tx * (1 - ty)
            + values[iy + 1, ix] * (1 - tx) * ty
            + values[iy + 1, ix + 1] * tx * ty)


def bilinear(fld: ScalarField | VectorField, lon, lat=None):
    """Bilinear interpolation from the four surrounding cell centres.

    Accepts a :class:`GeoPoint` or lon/lat arrays.  Vector fields are
    interpolated componentwise and returned as ``(vx, vy)`` without
    renormalisation.  Points in the half-cell margin outside the outermost
    centres take the edge value.
    """
    if isinstance(lon, GeoPoint):
        lon, lat = lon.lon, lon.lat
    ix, iy, tx, ty = _fractional_index(fld.spec, lon, lat)
    if isinstance(fld, VectorField):
        vx = _bilinear_array(fld.vx, ix, iy, tx, ty)
        vy = _bilinear_array(fld.vy, ix, iy, tx, ty)
        if np.ndim(vx) == 0:
            return float(vx), float(vy)
        return vx, vy
    out = _bilinear_array(fld.values, ix, iy, tx, ty)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# derived fields

def _grid_graph(spec: GridSpec) -> sparse.csr_matrix:
    """8-connected cell graph weighted by great-circle centre distances."""
    ny, nx = spec.shape
    idx = np.arange(ny * nx).reshape(ny, nx)
    lon, lat = spec.mesh()
    rows, cols, wts = [], [], []
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        ys = slice(0, ny - dy)
        yd = slice(dy, ny)
        xs = slice(max(0, -dx), nx - max(0, dx))
        xd = slice(max(0, dx), nx - max(0, -dx))
        a = idx[ys, xs].ravel()
        b = idx[yd, xd].ravel()
        w = great_circle_km(lon[ys, xs].ravel(), lat[ys, xs].ravel(),
                            lon[yd, xd].ravel(), lat[yd, xd].ravel())
        rows += [a, b]
        cols += [b, a]
        wts += [w, w]
    return sparse.csr_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(ny * nx, ny * nx))


def distance_to_land(altitude: ScalarField) -> ScalarField:
    """Distance (km) from each sea cell (a < 0) to the nearest land cell.

    Multi-source shortest paths over the 8-connected cell graph; accurate to
    grid resolution.  Land cells map to zero.  NaN altitudes count as sea.
    """
    alt = altitude.values
    land = np.nan_to_num(alt, nan=-1.0) >= 0
    if not land.any():
        raise ValueError("no land in domain")
    if land.all():
        return ScalarField(altitude.spec, np.zeros(alt.shape))
    graph = _grid_graph(altitude.spec)
    dist = csgraph.dijkstra(graph, directed=False, indices=np.flatnonzero(land.ravel()),
                            min_only=True)
    return ScalarField(altitude.spec, dist.reshape(alt.shape))


def build_diffusivity(altitude: ScalarField, d_land: ScalarField) -> ScalarField:
    """Dimensionless diffusivity from altitude (km), distance to land (km) and latitude.

    Land (a > 0) is suppressed smoothly above 1 km; sea cells (a <= 0) decay
    with distance from land over 10 km; everything is scaled by a linear
    latitude factor ``1.25 - lat/100``.  Cells with NaN altitude get zero.
    """
    spec = altitude.spec
    a = altitude.values
    lat = spec.lats[:, None]
    lat_factor = 1.25 - lat / 100.0
    with np.errstate(invalid="ignore"):
        land_term = 0.5 - 0.5 * np.tanh(10.0 * (a - 1.0))
        sea_term = np.exp(-d_land.values / COAST_DECAY_KM)
        nu = lat_factor * np.where(a > 0, land_term, sea_term)
    return ScalarField(spec, np.where(np.isnan(a), 0.0, nu))


def polyline_tangents(path: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit east/north chord directions at each vertex of a lon/lat polyline.

    The last vertex reuses the direction of the final chord.
    """
    path = np.asarray(path, dtype=float)
    if path.ndim != 2 or path.shape[0] < 2:
        raise ValueError("a polyline needs at least two points")
    xyz = lonlat_to_xyz(path[:, 0], path[:, 1])
    chord = np.diff(xyz, axis=0)
    chord = np.vstack([chord, chord[-1:]])
    east, north = east_north_basis(xyz)
    te = np.einsum("ij,ij->i", chord, east)
    tn = np.einsum("ij,ij->i", chord, north)
    norm = np.hypot(te, tn)
    norm = np.where(norm > 0, norm, 1.0)
    return te / norm, tn / norm


def remap_tangents(polylines: Sequence[np.ndarray | Sequence[GeoPoint]], spec: GridSpec,
                   cutoff_km: float = 300.0, chunk: int = 20000) -> VectorField:
    """Remap polyline tangents onto the grid with ``exp(-d/15 km)`` weights.

    The weighted vector sum at each node is renormalised to unit length;
    nodes whose summed magnitude is below 1e-6 get the zero vector.  Data
    points beyond ``cutoff_km`` are ignored (their weight is < 1e-8).
    """
    paths = []
    for pl in polylines:
        if len(pl) and isinstance(pl[0], GeoPoint):
            pl = np.array([(p.lon, p.lat) for p in pl])
        paths.append(np.asarray(pl, dtype=float))
    if not paths:
        return VectorField.zeros(spec)
    pts = np.vstack(paths)
    tang = [polyline_tangents(p) for p in paths]
    te = np.concatenate([t[0] for t in tang])
    tn = np.concatenate([t[1] for t in tang])

    lon, lat = spec.mesh()
    node_xyz = lonlat_to_xyz(lon.ravel(), lat.ravel())
    data_xyz = lonlat_to_xyz(pts[:, 0], pts[:, 1])
    tree = cKDTree(data_xyz)
    sx = np.zeros(node_xyz.shape[0])
    sy = np.zeros(node_xyz.shape[0])
    r_chord = float(arc_to_chord(cutoff_km))
    for start in range(0, node_xyz.shape[0], chunk):
        block = node_xyz[start:start + chunk]
        near = cKDTree(block).sparse_distance_matrix(tree, r_chord, output_type="coo_matrix")
        if near.nnz == 0:
            continue
        w = np.exp(-chord_to_arc_km(near.data) / TANGENT_DECAY_KM)
        sx[start:start + len(block)] += np.bincount(near.row, w * te[near.col], minlength=len(block))
        sy[start:start + len(block)] += np.bincount(near.row, w * tn[near.col], minlength=len(block))
    mag = np.hypot(sx, sy)
    keep = mag >= TANGENT_MIN_NORM
    safe = np.where(keep, mag, 1.0)
    vx = np.where(keep, sx / safe, 0.0).reshape(spec.shape)
    vy = np.where(keep, sy / safe, 0.0).reshape(spec.shape)
    return VectorField(spec, vx, vy)


@dataclass(frozen=True, eq=False)
class Environment:
    """Everything the front simulator reads: diffusivity and two tangent fields."""

    nu_l: ScalarField
    coast: VectorField
    river: VectorField
    altitude: ScalarField | None = field(default=None)

    @property
    def spec(self) -> GridSpec:
        return self.nu_l.spec

    @classmethod
    def from_altitude(cls, altitude: ScalarField, coast_lines=(), river_lines=()) -> "Environment":
        d_land = distance_to_land(altitude)
        nu = build_diffusivity(altitude, d_land)
        return cls(nu, remap_tangents(coast_lines, altitude.spec),
                   remap_tangents(river_lines, altitude.spec), altitude)

    @classmethod
    def uniform(cls, spec: GridSpec, nu_l: float = 1.0) -> "Environment":
        return cls(ScalarField(spec, np.full(spec.shape, float(nu_l))),
                   VectorField.zeros(spec), VectorField.zeros(spec))


# ---------------------------------------------------------------------------
# synthetic terrain

@dataclass(frozen=True)
class Hill:
    lon: float
    lat: float
    height_km: float
    width_km: float


def synthetic_altitude(spec: GridSpec, land_km: float = 0.2, hills: Iterable[Hill] = (),
                       sea_west_of: float | None = None, sea_depth_km: float = 0.5) -> ScalarField:
    """Flat land at ``land_km`` with Gaussian hills and an optional western sea."""
    lon, lat = spec.mesh()
    alt = np.full(spec.shape, float(land_km))
    for h in hills:
        d = great_circle_km(lon, lat, h.lon, h.lat)
        alt += h.height_km * np.exp(-0.5 * (d / h.width_km) ** 2)
    if sea_west_of is not None:
        alt = np.where(lon < sea_west_of, -abs(sea_depth_km), alt)
    return ScalarField(spec, alt)


def straight_polyline(start: GeoPoint, end: GeoPoint, n: int = 50) -> np.ndarray:
    """``n`` points spaced evenly along the great circle from start to end."""
    a = lonlat_to_xyz(start.lon, start.lat)
    b = lonlat_to_xyz(end.lon, end.lat)
    omega = math.acos(float(np.clip(a @ b, -1, 1)))
    s = np.linspace(0.0, 1.0, n)
    if omega < 1e-12:
        pts = np.repeat(a[None], n, axis=0)
    else:
        pts = (np.sin((1 - s) * omega)[:, None] * a + np.sin(s * omega)[:, None] * b) / math.sin(omega)
    lon, lat = xyz_to_lonlat(pts)
    return np.column_stack([lon, lat])


def field_mask_disc(spec: GridSpec, center: GeoPoint, radius_km: float) -> np.ndarray:
    lon, lat = spec.mesh()
    return great_circle_km(lon, lat, center.lon, center.lat) <= radius_km


# ---------------------------------------------------------------------------
# file formats

def read_ascii_grid(path: str | Path) -> ScalarField:
    """Read an ESRI-ASCII raster; nodata cells become NaN."""
    header = {}
    with open(path) as fh:
        for _ in range(6):
            line = fh.readline()
            key, val = line.split()
            header[key.lower()] = float(val)
        data = np.loadtxt(fh, ndmin=2)
    required = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")
    missing = [k for k in required if k not in header]
    if missing:
        raise ValueError(f"{path}: missing header keys {missing}")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    cs = header["cellsize"]
    spec = GridSpec(header["xllcorner"], header["xllcorner"] + ncols * cs,
                    header["yllcorner"], header["yllcorner"] + nrows * cs, cs)
    if data.shape != (nrows, ncols) or spec.shape != (nrows, ncols):
        raise ValueError(f"{path}: expected {nrows}x{ncols} values, got {data.shape}")
    nodata = header.get("nodata_value")
    values = data[::-1].astype(float)
    if nodata is not None:
        values[values == nodata] = np.nan
    return ScalarField(spec, values)


def write_ascii_grid(path: str | Path, fld: ScalarField, nodata: float = -9999.0,
                     fmt: str = "%.6g", comments: Sequence[str] = ()) -> None:
    spec = fld.spec
    values = np.where(np.isnan(fld.values), nodata, fld.values)[::-1]
    with open(path, "w") as fh:
        fh.write(f"ncols {spec.n_lon}\nnrows {spec.n_lat}\n")
        fh.write(f"xllcorner {spec.lon_min!r}\nyllcorner {spec.lat_min!r}\n")
        fh.write(f"cellsize {spec.cell_size!r}\nNODATA_value {nodata!r}\n")
        np.savetxt(fh, values, fmt=fmt)
    if comments:
        # sidecar keeps the raster itself strictly ESRI-compatible
        Path(str(path) + ".meta").write_text("".join(f"{c}\n" for c in comments))


def read_polylines(path: str | Path) -> list[np.ndarray]:
    """CSV ``path_id,lon,lat`` -> list of (m, 2) arrays in file order."""
    paths: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for lineno, row in enumerate(rows, start=2):
            try:
                paths.setdefault(row["path_id"], []).append((float(row["lon"]), float(row["lat"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed polyline row") from exc
    return [np.array(v) for v in paths.values()]


def write_polylines(path: str | Path, polylines: Sequence[np.ndarray], ids: Sequence[str] | None = None) -> None:
    ids = ids or [str(i) for i in range(len(polylines))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "lon", "lat"])
        for pid, pl in zip(ids, polylines):
            for lon, lat in np.asarray(pl):
                w.writerow([pid, repr(float(lon)), repr(float(lat))])
