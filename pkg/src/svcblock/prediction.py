"""Posterior predictive sampling, areal and block totals, and aggregation.

For posterior draw ``l`` the prediction at new units is drawn from the
Gaussian conditional of the new responses given the observed ``y`` under
the marginal model (random effects integrated out).  Every draw uses its
own RNG substream keyed by a draw key, so results do not depend on how the
draws are split across workers.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .covariance import chol, correlation, distance_matrix
from .mcmc import PosteriorSamples
from .model import Dataset, ModelSpec, design_matrix, marginal_cov

DEFAULT_MAX_JOINT = 2000


@dataclass
class PredictionUnit:
    """A prediction location with the predictors measured over its extent."""

    location: tuple
    area: float
    predictors: Mapping[str, float]
    parent: str = ""

    def __post_init__(self):
        self.location = (float(self.location[0]), float(self.location[1]))
        if not self.area > 0:
            raise ValueError(f"unit area must be positive, got {self.area}")


@dataclass
class PpdSamples:
    """Posterior predictive draws, one row per posterior draw."""

    draws: np.ndarray
    units: list = field(default_factory=list)

    @property
    def M(self):
        return self.draws.shape[0]


@dataclass
class EffectSurface:
    """Draws of each active random-effect surface at a set of locations."""

    coords: np.ndarray
    surfaces: dict


@dataclass(frozen=True)
class PpdSummary:
    mean: float
    median: float
    sd: float
    cv: float
    lower: float
    upper: float
    level: float = 0.95


def _unit_arrays(units: Sequence[PredictionUnit], predictors):
    coords = np.array([u.location for u in units], dtype=float).reshape(-1, 2)
    rows = []
    for i, u in enumerate(units):
        missing = [p for p in predictors if p not in u.predictors]
        if missing:
            raise ValueError(f"unit {i} ({u.parent}) lacks fitted predictor(s) {missing}")
        rows.append([float(u.predictors[p]) for p in predictors])
    Xnew = np.column_stack([np.ones(len(units)), np.array(rows).reshape(len(units), -1)])
    if not np.all(np.isfinite(Xnew)):
        raise ValueError("non-finite predictor values in prediction units")
    return coords, Xnew


def _fitted_dataset(samples: PosteriorSamples, ds: Dataset) -> Dataset:
    if ds.names == samples.predictors:
        return ds
    return ds.subset(samples.predictors)


def _rng(seed, key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(key),)))


def _default_groups(units, max_joint):
    if len(units) <= max_joint:
        return [np.arange(len(units))]
    order = {}
    for i, u in enumerate(units):
        order.setdefault(u.parent, []).append(i)
    groups = [np.array(v) for v in order.values()]
    if max(len(g) for g in groups) > max_joint:
        raise ValueError("a single blowdown has more cells than max_joint; raise the limit")
    return groups


class _Conditioner:
    """Per-draw Gaussian conditional of new responses given observed y."""

    def __init__(self, samples, ds, spec, coords, Xnew, groups):
        self.samples, self.ds, self.spec = samples, ds, spec
        self.X = design_matrix(ds)
        self.Xnew, self.groups = Xnew, groups
        if spec.is_spatial:
            self.D = distance_matrix(ds.coords)
            self.Dno = distance_matrix(coords, ds.coords)
            self.Dg = [distance_matrix(coords[g]) for g in groups]

    def _prior_block(self, p, g, Dg):
        xg = self.Xnew[g]
        Kg = np.zeros((g.size, g.size))
        for k, s2, ph in zip(self.spec.active, p.sigma2, p.phi):
            Kg += s2 * (np.outer(xg[:, k], xg[:, k]) * correlation(Dg, ph, self.spec.nu))
        Kg[np.diag_indices(g.size)] += p.tau2
        return Kg

    def moments(self, l):
        """Conditional mean of all units and the covariance of each group."""
        mean, covs, _ = self._moments(l)
        return mean, covs

    def _moments(self, l):
        p = self.samples.params(l)
        mean_new = self.Xnew @ p.beta
        if not self.spec.is_spatial:
            return mean_new, [p.tau2 * np.eye(g.size) for g in self.groups], None
        priors = [self._prior_block(p, g, Dg) for g, Dg in zip(self.groups, self.Dg)]
        scales = [float(np.mean(np.diag(Kg))) if Kg.size else 1.0 for Kg in priors]
        if self.ds.n == 0:
            return mean_new, priors, scales
        K = marginal_cov(p, self.ds, self.spec, dist=self.D, X=self.X)
        L = chol(K, scale=np.mean(np.diag(K)), name="observed covariance")
        alpha = linalg.cho_solve((L, True), self.ds.y - self.X @ p.beta, check_finite=False)
        C = np.zeros((self.Xnew.shape[0], self.X.shape[0]))
        for k, s2, ph in zip(self.spec.active, p.sigma2, p.phi):
            C += s2 * (self.Xnew[:, k, None] * correlation(self.Dno, ph, self.spec.nu)
                       * self.X[None, :, k])
        A = linalg.solve_triangular(L, C.T, lower=True, check_finite=False)
        covs = [Kg - A[:, g].T @ A[:, g] for g, Kg in zip(self.groups, priors)]
        return mean_new + C @ alpha, covs, scales

    def draw(self, l, key, seed):
        rng = _rng(seed, key)
        mean, covs, scales = self._moments(l)
        out = np.empty(self.Xnew.shape[0])
        if not self.spec.is_spatial:
            sd = np.sqrt(self.samples.params(l).tau2)
            for g in self.groups:
                out[g] = mean[g] + sd * rng.standard_normal(g.size)
            return out
        for g, V, scale in zip(self.groups, covs, scales):
            Lv = chol(V, scale=scale, name="conditional predictive covariance")
            out[g] = mean[g] + Lv @ rng.standard_normal(g.size)
        return out


def conditional_moments(samples: PosteriorSamples, ds: Dataset, units, l=0, groups=None):
    """Mean vector and per-group covariances of the predictive conditional
    for posterior draw ``l``."""
    ds = _fitted_dataset(samples, ds)
    coords, Xnew = _unit_arrays(units, samples.predictors)
    groups = [np.arange(len(units))] if groups is None else [np.asarray(g) for g in groups]
    return _Conditioner(samples, ds, samples.spec, coords, Xnew, groups).moments(l)


def _draw_rows(args):
    cond, rows, keys, seed = args
    return np.array([cond.draw(l, k, seed) for l, k in zip(rows, keys)]).reshape(len(rows), -1)


def _map_draws(cond, keys, seed, workers):
    rows = np.arange(len(keys))
    if workers <= 1:
        return _draw_rows((cond, rows, keys, seed))
    chunks = np.array_split(rows, workers * 4)
    jobs = [(cond, c, keys[c], seed) for c in chunks if c.size]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return np.concatenate(list(ex.map(_draw_rows, jobs)))


def joint_ppd(samples: PosteriorSamples, ds: Dataset, spec: ModelSpec | None,
              units: Sequence[PredictionUnit], seed=0, draw_keys=None, groups=None,
              max_joint=DEFAULT_MAX_JOINT, workers=1) -> PpdSamples:
    """Joint composition sampling of the response at ``units``.

    Units in the same group are drawn jointly; by default all units form
    one group unless there are more than ``max_joint`` of them, in which
    case units are grouped by ``parent``.  Groups are conditionally
    independent given the draw.
    """
    spec = samples.spec if spec is None else spec
    if spec != samples.spec:
        raise ValueError("model spec does not match the posterior samples")
    ds = _fitted_dataset(samples, ds)
    coords, Xnew = _unit_arrays(units, samples.predictors)
    groups = _default_groups(units, max_joint) if groups is None else [np.asarray(g) for g in groups]
    keys = np.arange(samples.M) if draw_keys is None else np.asarray(draw_keys)
    if keys.shape != (samples.M,):
        raise ValueError("one draw key per posterior draw required")
    cond = _Conditioner(samples, ds, spec, coords, Xnew, groups)
    return PpdSamples(_map_draws(cond, keys, seed, workers), list(units))


def recover_effect_surfaces(samples: PosteriorSamples, ds: Dataset, spec: ModelSpec | None,
                            locations, seed=0, draw_keys=None) -> EffectSurface:
    """Draws of the random effects w_k at ``locations`` given the data."""
    spec = samples.spec if spec is None else spec
    if not spec.is_spatial:
        raise ValueError("non-spatial model has no random-effect surfaces")
    ds = _fitted_dataset(samples, ds)
    coords = np.atleast_2d(np.asarray(locations, dtype=float))
    X = design_matrix(ds)
    D, Dno, Dnn = (distance_matrix(ds.coords), distance_matrix(coords, ds.coords),
                   distance_matrix(coords))
    keys = np.arange(samples.M) if draw_keys is None else np.asarray(draw_keys)
    m, na = coords.shape[0], len(spec.active)
    out = np.empty((samples.M, na, m))
    for l in range(samples.M):
        rng = _rng(seed, keys[l])
        p = samples.params(l)
        prior = np.zeros((na * m, na * m))
        C = np.empty((na * m, ds.n))
        for j, (k, s2, ph) in enumerate(zip(spec.active, p.sigma2, p.phi)):
            sl = slice(j * m, (j + 1) * m)
            prior[sl, sl] = s2 * correlation(Dnn, ph, spec.nu)
            C[sl] = s2 * correlation(Dno, ph, spec.nu) * X[None, :, k]
        if ds.n == 0:
            # nothing to condition on: draws come from the prior
            Lv = chol(prior, scale=float(np.mean(np.diag(prior))), name="random-effect prior")
            out[l] = (Lv @ rng.standard_normal(na * m)).reshape(na, m)
            continue
        K = marginal_cov(p, ds, spec, dist=D, X=X)
        L = chol(K, scale=np.mean(np.diag(K)), name="observed covariance")
        alpha = linalg.cho_solve((L, True), ds.y - X @ p.beta, check_finite=False)
        A = linalg.solve_triangular(L, C.T, lower=True, check_finite=False)
        V = prior - A.T @ A
        Lv = chol(V, scale=float(np.mean(np.diag(prior))), name="random-effect conditional")
        out[l] = (C @ alpha + Lv @ rng.standard_normal(na * m)).reshape(na, m)
    labels = ["0"] + list(samples.predictors)
    return EffectSurface(coords, {labels[k]: out[:, j] for j, k in enumerate(spec.active)})


def areal_total(ppd_column, area) -> np.ndarray:
    """Total (m3) from per-hectare draws at a single centroid: ``A * y``."""
    if not area > 0:
        raise ValueError("area must be positive")
    return float(area) * np.asarray(ppd_column, dtype=float)


def block_total(ppd, cell_areas, area=None) -> np.ndarray:
    """Total (m3) as the per-draw area-weighted sum over a blowdown's cells."""
    draws = np.asarray(ppd.draws if isinstance(ppd, PpdSamples) else ppd, dtype=float)
    draws = draws.reshape(draws.shape[0], -1)
    a = np.asarray(cell_areas, dtype=float).ravel()
    if draws.shape[1] != a.size:
        raise ValueError(f"{draws.shape[1]} cell columns but {a.size} cell areas")
    if area is not None and abs(a.sum() - area) > 1e-9 * area:
        raise ValueError(f"cell areas sum to {a.sum()} ha, blowdown area is {area} ha")
    return draws @ a


REGION = "Total"


def aggregate_totals(totals: Mapping[str, np.ndarray], grouping: Mapping[str, str],
                     labels: Sequence[str] | None = None) -> dict:
    """Per-draw totals by group plus the region total.

    The region total is the sum of the group totals, so the additivity holds
    exactly draw by draw.
    """
    if labels is None:
        labels = sorted({grouping[b] for b in totals if b in grouping})
    groups = {g: None for g in labels}
    for b, draws in totals.items():
        if b not in grouping:
            raise KeyError(f"blowdown {b!r} has no group")
        g = grouping[b]
        if g not in groups:
            raise KeyError(f"unknown group label {g!r}")
        groups[g] = draws.copy() if groups[g] is None else groups[g] + draws
    M = len(next(iter(totals.values())))
    out = {g: (v if v is not None else np.zeros(M)) for g, v in groups.items()}
    region = np.zeros(M)
    for g in labels:
        region = region + out[g]
    out[REGION] = region
    return out


def summarize(draws, level=0.95) -> PpdSummary:
    """Mean, median, sd, cv (%) and equal-tailed interval of a draw vector.

    Percentiles use linear interpolation between order statistics.
    """
    x = np.asarray(draws, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least two draws")
    a = 100 * (1 - level) / 2
    lo, med, hi = np.percentile(x, [a, 50.0, 100 - a])
    mean = float(np.mean(x))
    sd = float(np.std(x, ddof=1))
    cv = 100.0 * sd / mean if mean > 0 else float("nan")
    return PpdSummary(mean, float(med), sd, cv, float(lo), float(hi), level)


def _level_tag(level):
    return f"{100 * level:g}".replace(".", "_")


def summary_header(level=0.95):
    t = _level_tag(level)
    return ["id", "subregion", "area_ha", "mean", "median", "sd", "cv_pct", f"lo{t}", f"hi{t}"]


def write_summary_csv(path, records, level=0.95):
    """``records`` are (id, subregion, area_ha, PpdSummary) tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(summary_header(level))
        for bid, sub, area, s in records:
            w.writerow([bid, sub, repr(float(area)), repr(s.mean), repr(s.median), repr(s.sd),
                        repr(s.cv), repr(s.lower), repr(s.upper)])


def geojson_join(collection: dict, summaries: Mapping[str, Mapping[str, PpdSummary]]) -> dict:
    """Copy a FeatureCollection with PPD summaries added to each feature's properties."""
    out = json.loads(json.dumps(collection))
    for feat in out["features"]:
        bid = str(feat["properties"]["id"])
        for mode, per_id in summaries.items():
            s = per_id.get(bid)
            if s is None:
                continue
            feat["properties"].update({
                f"{mode}_mean": s.mean, f"{mode}_median": s.median, f"{mode}_sd": s.sd,
                f"{mode}_cv_pct": None if np.isnan(s.cv) else s.cv,
                f"{mode}_lower": s.lower, f"{mode}_upper": s.upper,
            })
    return out


def totals_table(group_draws: Mapping[str, np.ndarray], areas: Mapping[str, float],
                 level=0.95) -> str:
    """Group totals as 'median (lower, upper)' next to the group area."""
    rows = [("", "Area (ha)", "Volume (m3)")]
    for g, draws in group_draws.items():
        s = summarize(draws, level)
        rows.append((g, f"{areas[g]:.2f}", f"{s.median:.0f} ({s.lower:.0f}, {s.upper:.0f})"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)
