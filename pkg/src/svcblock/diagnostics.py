"""Model fit criteria and leave-one-out prediction scores.

DIC uses the marginal likelihood (random effects integrated out).  The
pointwise densities behind WAIC are the leave-one-out conditionals of the
marginal model,

    p(y_i | y_-i, params) = N(y_i - (Q r)_i / Q_ii, 1 / Q_ii),

with ``Q`` the inverse marginal covariance and ``r = y - X beta``.  For the
non-spatial model ``Q`` is diagonal and these reduce to the independent
Normal densities.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit, logit, logsumexp

from .covariance import chol, distance_matrix
from .mcmc import McmcConfig, PosteriorSamples, run_mcmc
from .model import (LOG_2PI, Dataset, ModelSpec, ParamVector, Priors, default_priors,
                    design_matrix, marginal_cov, marginal_loglik)
from .prediction import PredictionUnit, joint_ppd, summarize

log = logging.getLogger(__name__)


@dataclass
class FitReport:
    dic: float
    p_d: float
    L: float
    waic1: float
    waic2: float
    p1: float
    p2: float
    lppd: float


@dataclass
class HoldoutRecord:
    id: str
    observed: float
    mean: float
    median: float
    sd: float
    lower: float
    upper: float
    crps: float

    @property
    def covered(self) -> bool:
        return self.lower <= self.observed <= self.upper


@dataclass
class CvReport:
    mspe: float
    crps: float
    ci_cover: float
    records: list = field(default_factory=list)


def _loglik_per_draw(samples: PosteriorSamples, ds: Dataset, spec: ModelSpec):
    dist = distance_matrix(ds.coords) if spec.is_spatial else None
    return np.array([marginal_loglik(samples.params(l), ds, spec, dist=dist)
                     for l in range(samples.M)])


def plugin_params(samples: PosteriorSamples, plugin="transformed") -> ParamVector:
    """Posterior-mean parameter value used as the DIC plug-in.

    ``"transformed"`` averages log variances and logit-scaled phi (plain log
    phi when the prior support is unknown) and maps back; ``"mean"``
    averages on the natural scale.
    """
    spec = samples.spec
    if plugin == "mean":
        return ParamVector.from_array(samples.draws.mean(axis=0), spec)
    if plugin != "transformed":
        raise ValueError(f"unknown plug-in {plugin!r}")
    nb, na = spec.p + 1, len(spec.active)
    d = samples.draws
    beta = d[:, :nb].mean(axis=0)
    sigma2 = np.exp(np.log(d[:, nb:nb + na]).mean(axis=0))
    phi_draws = d[:, nb + na:nb + 2 * na]
    if samples.priors is not None and na:
        lo = np.array([p[0] for p in samples.priors.phi])
        hi = np.array([p[1] for p in samples.priors.phi])
        s = np.clip((phi_draws - lo) / (hi - lo), 1e-15, 1 - 1e-15)
        phi = lo + (hi - lo) * expit(logit(s).mean(axis=0))
    else:
        phi = np.exp(np.log(phi_draws).mean(axis=0)) if na else np.zeros(0)
    tau2 = float(np.exp(np.log(d[:, -1]).mean()))
    return ParamVector(beta, sigma2, phi, tau2)


def dic(samples: PosteriorSamples, ds: Dataset, spec: ModelSpec | None = None,
        plugin="transformed"):
    """Return ``(dic, p_d, L)`` with ``L`` the log-likelihood at the plug-in."""
    spec = samples.spec if spec is None else spec
    ds = ds if ds.names == samples.predictors else ds.subset(samples.predictors)
    dbar = -2.0 * float(np.mean(_loglik_per_draw(samples, ds, spec)))
    L = float(marginal_loglik(plugin_params(samples, plugin), ds, spec))
    p_d = dbar + 2.0 * L
    return -2.0 * (L - p_d), p_d, L


def pointwise_loglik(samples: PosteriorSamples, ds: Dataset, spec: ModelSpec | None = None):
    """M x n matrix of leave-one-out conditional log densities."""
    spec = samples.spec if spec is None else spec
    ds = ds if ds.names == samples.predictors else ds.subset(samples.predictors)
    X = design_matrix(ds)
    dist = distance_matrix(ds.coords) if spec.is_spatial else None
    out = np.empty((samples.M, ds.n))
    eye = np.eye(ds.n)
    for l in range(samples.M):
        p = samples.params(l)
        r = ds.y - X @ p.beta
        if not spec.is_spatial:
            out[l] = -0.5 * (LOG_2PI + np.log(p.tau2) + r * r / p.tau2)
            continue
        K = marginal_cov(p, ds, spec, dist=dist, X=X)
        L = chol(K, scale=np.mean(np.diag(K)), name="marginal covariance")
        Q = linalg.cho_solve((L, True), eye, check_finite=False)
        q = np.diag(Q)
        e = Q @ r / q
        out[l] = -0.5 * (LOG_2PI - np.log(q) + q * e * e)
    return out


def waic_from_pointwise(ll):
    """``(waic1, waic2, p1, p2, lppd)`` from an M x n log-density matrix."""
    ll = np.asarray(ll, dtype=float)
    M = ll.shape[0]
    lme = logsumexp(ll, axis=0) - np.log(M)
    lppd = float(np.sum(lme))
    p1 = float(2.0 * np.sum(lme - ll.mean(axis=0)))
    p2 = float(np.sum(ll.var(axis=0, ddof=1))) if M > 1 else 0.0
    return -2.0 * (lppd - p1), -2.0 * (lppd - p2), p1, p2, lppd


def waic(samples: PosteriorSamples, ds: Dataset, spec: ModelSpec | None = None):
    return waic_from_pointwise(pointwise_loglik(samples, ds, spec))


def fit_report(samples: PosteriorSamples, ds: Dataset, plugin="transformed") -> FitReport:
    d, p_d, L = dic(samples, ds, plugin=plugin)
    w1, w2, p1, p2, lppd = waic(samples, ds)
    return FitReport(d, p_d, L, w1, w2, p1, p2, lppd)


def crps_from_samples(draws, obs) -> float:
    """Empirical CRPS: mean|X - y| - 0.5 mean|X - X'| over all draw pairs.

    The pair term is evaluated exactly in O(M log M) from the sorted draws.
    """
    x = np.sort(np.asarray(draws, dtype=float).ravel())
    M = x.size
    if M < 2:
        raise ValueError("CRPS needs at least two draws")
    term1 = np.mean(np.abs(x - obs))
    i = np.arange(1, M + 1)
    pair_sum = 2.0 * np.sum((2 * i - M - 1) * x)
    return float(max(term1 - 0.5 * pair_sum / (M * M), 0.0))


def mspe(pred_means, obs) -> float:
    pred_means = np.asarray(pred_means, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if pred_means.size == 0:
        raise ValueError("empty input")
    if pred_means.shape != obs.shape:
        raise ValueError("prediction and observation vectors differ in length")
    return float(np.mean((pred_means - obs) ** 2))


def fold_seed(seed, i) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(i,)).generate_state(1)[0])


def _loo_fold(args):
    ds, spec, priors, cfg, i, level = args
    train = ds.drop(i)
    pri = default_priors(train, spec) if priors is None else priors
    seed = fold_seed(cfg.seed, i)
    try:
        samples = run_mcmc(train, spec, pri, cfg.with_seed(seed))
        unit = PredictionUnit(tuple(ds.coords[i]), 1.0, dict(zip(ds.names, ds.X[i])), ds.ids[i])
        draws = joint_ppd(samples, train, spec, [unit], seed=seed).draws[:, 0]
    except Exception as exc:
        raise RuntimeError(f"LOO fold {i} (id {ds.ids[i]}) failed: {exc}") from exc
    s = summarize(draws, level)
    return HoldoutRecord(ds.ids[i], float(ds.y[i]), s.mean, s.median, s.sd, s.lower, s.upper,
                         crps_from_samples(draws, ds.y[i]))


def cv_report(records, level=0.95) -> CvReport:
    obs = [r.observed for r in records]
    return CvReport(mspe([r.mean for r in records], obs),
                    float(np.mean([r.crps for r in records])),
                    100.0 * float(np.mean([r.covered for r in records])),
                    list(records))


def loo_cv(ds: Dataset, spec: ModelSpec, priors: Priors | None = None,
           cfg: McmcConfig = McmcConfig(), level=0.95, workers=1) -> CvReport:
    """Refit without each observation in turn and score its predictive draws.

    With ``priors=None`` each fold uses the default priors of its own
    training data.
    """
    if ds.n < 3:
        raise ValueError("LOO needs at least three observations")
    fold_cfg = McmcConfig(**{**asdict(cfg), "workers": 1})
    jobs = [(ds, spec, priors, fold_cfg, i, level) for i in range(ds.n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(_loo_fold, jobs))
    else:
        records = [_loo_fold(j) for j in jobs]
    return cv_report(records, level)


ROWS = (("DIC", "dic"), ("p_D", "p_d"), ("L", "L"), None,
        ("WAIC1", "waic1"), ("WAIC2", "waic2"), ("p1", "p1"), ("p2", "p2"), ("LPPD", "lppd"),
        None, ("MSPE", "mspe"), ("CRPS", "crps"), ("CI cover", "ci_cover"))


def criteria_table(fits: dict, cvs: dict | None = None, digits=1) -> str:
    """Fit and LOO criteria with one column per model."""
    cvs = cvs or {}
    models = list(fits) or list(cvs)
    rows = [["Model"] + models]
    rule = None
    for entry in ROWS:
        if entry is None:
            rows.append(rule)
            continue
        label, attr = entry
        src = cvs if attr in ("mspe", "crps", "ci_cover") else fits
        if not any(m in src for m in models):
            continue
        rows.append([label] + [f"{getattr(src[m], attr):.{digits}f}" if m in src else ""
                               for m in models])
    body = [r for r in rows if r is not None]
    widths = [max(len(r[i]) for r in body) for i in range(len(models) + 1)]
    lines = []
    for r in rows:
        if r is None:
            if lines and not lines[-1].startswith("-"):
                lines.append("-" * (sum(widths) + 2 * len(models)))
            continue
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    while lines and lines[-1].startswith("-"):
        lines.pop()
    return "\n".join(lines)


def reports_json(fits: dict, cvs: dict | None = None) -> str:
    out = {}
    for m in set(fits) | set(cvs or {}):
        entry = {}
        if m in fits:
            entry["fit"] = asdict(fits[m])
        if cvs and m in cvs:
            entry["cv"] = asdict(cvs[m])
        out[m] = entry
    return json.dumps(out, indent=2, sort_keys=True)
