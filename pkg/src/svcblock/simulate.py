"""Synthetic plots, blowdowns and ALS-like rasters from a known SVC truth."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import shapely
import shapely.affinity

from .covariance import chol, correlation, distance_matrix
from .geo import Circle, Polygon, Raster, raster_mean
from .model import Dataset

PREDICTORS = ("hmean", "hmedian", "hmin", "hmax", "hsd")


@dataclass(frozen=True)
class Truth:
    beta0: float = 170.0
    beta1: float = 33.0
    sigma2_0: float = 9000.0
    phi_0: float = 6.0
    sigma2_1: float = 40.0
    phi_1: float = 1.5
    tau2: float = 3000.0
    nu: float = 0.5


@dataclass(frozen=True)
class SimulationConfig:
    n_plots: int = 62
    n_blowdowns: int = 40
    n_subregions: int = 5
    extent_km: float = 3.0
    raster_cell_m: float = 5.0
    plot_radius_km: float = 0.02
    blowdown_median_ha: float = 0.3
    truth: Truth = field(default_factory=Truth)


def simulate_gp(coords, sigma2, phi, rng, nu=0.5):
    """One draw of a zero-mean GP with Matérn covariance at ``coords``."""
    C = sigma2 * correlation(distance_matrix(coords), phi, nu)
    return chol(C, scale=sigma2, name="simulation covariance") @ rng.standard_normal(len(C))


def smooth_field(x, y, rng, n_waves=60, length_km=0.6):
    """Unit-variance stationary random field from random Fourier features."""
    omega = rng.normal(0.0, 1.0 / length_km, size=(n_waves, 2))
    phase = rng.uniform(0, 2 * np.pi, n_waves)
    out = np.zeros_like(x)
    for (ox, oy), ph in zip(omega, phase):
        out += np.cos(ox * x + oy * y + ph)
    return out * math.sqrt(2.0 / n_waves)


def simulate_rasters(cfg: SimulationConfig, rng) -> dict:
    cell_km = cfg.raster_cell_m / 1000.0
    n = int(math.ceil(cfg.extent_km / cell_km))
    rows, cols = np.mgrid[0:n, 0:n]
    x = (cols + 0.5) * cell_km
    y = (n - rows - 0.5) * cell_km
    f1, f2, f3 = (smooth_field(x, y, rng) for _ in range(3))
    texture = rng.standard_normal((4, n, n))
    mean = np.clip(22.0 + 6.0 * f1 + 1.0 * texture[0], 2.0, None)
    sd = np.clip(4.0 + 1.2 * f2 + 0.4 * texture[1], 0.5, None)
    median = np.clip(mean + 0.8 * f3 + 0.5 * texture[2], 1.0, None)
    hmax = mean + 2.2 * sd + 0.8 * np.abs(texture[3])
    hmin = np.clip(mean - 2.5 * sd, 0.0, None)
    grids = dict(zip(PREDICTORS, (mean, median, hmin, hmax, sd)))
    return {name: Raster(np.round(g, 6), 0.0, 0.0, cfg.raster_cell_m, -9999.0, name)
            for name, g in grids.items()}


def _blob(center, area_ha, rng, n_vertices=14):
    # star-shaped polygon with radius chosen to hit the requested area
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = np.exp(rng.normal(0.0, 0.25, n_vertices))
    pts = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    poly = shapely.Polygon(pts)
    if not poly.is_valid or poly.area <= 0:
        return None
    scale = math.sqrt(area_ha / 100.0 / poly.area)
    return shapely.affinity.translate(shapely.affinity.scale(poly, scale, scale, origin=(0, 0)),
                                      *center)


def simulate_blowdowns(cfg: SimulationConfig, rng):
    margin = 0.25 * cfg.extent_km
    centers = rng.uniform(margin, cfg.extent_km - margin, size=(cfg.n_subregions, 2))
    labels = [f"sub{k + 1}" for k in range(cfg.n_subregions)]
    polys, taken = [], []
    attempts = 0
    while len(polys) < cfg.n_blowdowns:
        attempts += 1
        if attempts > 200 * cfg.n_blowdowns:
            raise RuntimeError("could not place the requested number of blowdowns")
        k = len(polys) % cfg.n_subregions
        c = centers[k] + rng.normal(0.0, 0.12 * cfg.extent_km / 3.0, 2)
        area = float(np.clip(cfg.blowdown_median_ha * np.exp(rng.normal(0, 0.8)), 0.02, 4.0))
        g = _blob(c, area, rng)
        if g is None:
            continue
        minx, miny, maxx, maxy = g.bounds
        if minx < 0.05 or miny < 0.05 or maxx > cfg.extent_km - 0.05 or maxy > cfg.extent_km - 0.05:
            continue
        if any(g.distance(t) < 0.01 for t in taken):
            continue
        taken.append(g)
        polys.append(Polygon.from_shapely(g, f"b{len(polys) + 1:03d}", labels[k]))
    return polys, centers, labels


def simulate_plots(cfg: SimulationConfig, rasters, blowdowns, centers, rng):
    union = shapely.union_all([p.to_shapely() for p in blowdowns]).buffer(cfg.plot_radius_km)
    pts = []
    lo, hi = 0.05, cfg.extent_km - 0.05
    while len(pts) < cfg.n_plots:
        k = rng.integers(len(centers))
        p = centers[k] + rng.normal(0.0, 0.2 * cfg.extent_km / 3.0, 2)
        if not (lo < p[0] < hi and lo < p[1] < hi):
            continue
        if union.contains(shapely.Point(p)):
            continue
        if any(np.hypot(*(p - q)) < 2 * cfg.plot_radius_km for q in pts):
            continue
        pts.append(p)
    coords = np.array(pts)
    X = np.array([[raster_mean(rasters[name], Circle(tuple(c), cfg.plot_radius_km))
                   for name in PREDICTORS] for c in coords])
    t = cfg.truth
    w0 = simulate_gp(coords, t.sigma2_0, t.phi_0, rng, t.nu)
    w1 = simulate_gp(coords, t.sigma2_1, t.phi_1, rng, t.nu)
    x1 = X[:, 0]
    y = t.beta0 + w0 + x1 * (t.beta1 + w1) + rng.normal(0.0, math.sqrt(t.tau2), len(x1))
    ids = tuple(f"p{i + 1:03d}" for i in range(len(y)))
    return Dataset(coords, y, X, PREDICTORS, ids)


def simulate(cfg: SimulationConfig, seed):
    """Return (plots Dataset, blowdown Polygons, rasters by name, truth dict)."""
    rng = np.random.default_rng(seed)
    rasters = simulate_rasters(cfg, rng)
    blowdowns, centers, _ = simulate_blowdowns(cfg, rng)
    plots = simulate_plots(cfg, rasters, blowdowns, centers, rng)
    return plots, blowdowns, rasters, asdict(cfg.truth)
