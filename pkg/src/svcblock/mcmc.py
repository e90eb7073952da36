"""Posterior sampling for the marginal SVC model.

Each iteration makes one adaptive random-walk Metropolis move on the
covariance parameters (log sigma2, logit-scaled phi, log tau2) with beta
integrated out, followed, at retained iterations, by an exact Gibbs draw
of beta from its Gaussian conditional.  The pair is a draw from the joint
posterior.  Proposal adaptation (scale and covariance) runs only during
burn-in and is frozen afterwards.
"""
from __future__ import annotations

import csv
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

from .covariance import chol, distance_matrix
from .model import (Dataset, ModelSpec, ParamVector, Priors, beta_conditional,
                    default_priors, design_matrix, gaussian_logpdf_chol, log_prior,
                    marginal_cov, ols, param_names, _resid_var_floor)


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 3
    n_iterations: int = 25_000
    burn_in: int = 5_000
    thinning: int = 5
    seed: int = 0
    target_accept: float | None = None
    adapt_interval: int = 100
    init_jitter: float = 0.1
    workers: int = 1

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("burn_in must be smaller than n_iterations")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.target_accept is not None and not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.adapt_interval < 1:
            raise ValueError("adapt_interval must be >= 1")

    @property
    def draws_per_chain(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thinning

    def with_seed(self, seed) -> "McmcConfig":
        return replace(self, seed=int(seed))


@dataclass
class PosteriorSamples:
    """Retained draws, pooled over chains in chain order."""

    draws: np.ndarray
    names: list
    spec: ModelSpec
    predictors: tuple
    log_post: np.ndarray
    chain: np.ndarray
    acceptance: dict = field(default_factory=dict)
    priors: Priors | None = None

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        self.log_post = np.asarray(self.log_post, dtype=float)
        self.chain = np.asarray(self.chain, dtype=int)
        self.predictors = tuple(self.predictors)
        if self.draws.shape[1] != len(self.names):
            raise ValueError("one name per draw column required")

    @property
    def M(self) -> int:
        return self.draws.shape[0]

    def params(self, l) -> ParamVector:
        return ParamVector.from_array(self.draws[l], self.spec)

    def column(self, name) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def by_chain(self) -> np.ndarray:
        """Draws as an array of shape (chains, draws, parameters)."""
        labels = np.unique(self.chain)
        sizes = {int(np.sum(self.chain == c)) for c in labels}
        if len(sizes) != 1:
            raise ValueError("chains have unequal lengths")
        return np.stack([self.draws[self.chain == c] for c in labels])

    def take(self, rows) -> "PosteriorSamples":
        rows = np.asarray(rows)
        return replace(self, draws=self.draws[rows], log_post=self.log_post[rows],
                       chain=self.chain[rows])

    @classmethod
    def point_mass(cls, params: ParamVector, spec: ModelSpec, predictors, M=10):
        arr = np.tile(params.to_array(), (M, 1))
        return cls(arr, param_names(spec, predictors), spec, predictors,
                   np.zeros(M), np.zeros(M, dtype=int))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(self.names) + ["chain", "log_posterior"])
            for row, c, lp in zip(self.draws, self.chain, self.log_post):
                w.writerow([repr(float(v)) for v in row] + [int(c), repr(float(lp))])

    @classmethod
    def from_csv(cls, path, spec: ModelSpec, predictors):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty draws file")
        header, body = rows[0], rows[1:]
        names = param_names(spec, predictors)
        if header[:-2] != names or header[-2:] != ["chain", "log_posterior"]:
            raise ValueError(f"{path}: header {header} does not match model {spec.label}")
        arr = np.array([[float(v) for v in r] for r in body])
        return cls(arr[:, :-2], names, spec, predictors, arr[:, -1], arr[:, -2].astype(int))


class _Target:
    """Collapsed log posterior of the unconstrained covariance parameters."""

    def __init__(self, ds: Dataset, spec: ModelSpec, priors: Priors, likelihood=True):
        self.ds, self.spec, self.priors = ds, spec, priors
        self.X = design_matrix(ds)
        self.dist = distance_matrix(ds.coords) if spec.is_spatial else None
        self.na = len(spec.active)
        self.lo = np.array([p[0] for p in priors.phi])
        self.hi = np.array([p[1] for p in priors.phi])
        self.likelihood = likelihood

    @property
    def dim(self):
        return 2 * self.na + 1

    def to_theta(self, u):
        na = self.na
        sigma2 = np.exp(u[:na])
        phi = self.lo + (self.hi - self.lo) * expit(u[na:2 * na])
        return sigma2, phi, float(np.exp(u[-1]))

    def to_u(self, sigma2, phi, tau2):
        s = (np.asarray(phi) - self.lo) / (self.hi - self.lo)
        return np.concatenate([np.log(sigma2), logit(s), [np.log(tau2)]])

    def log_jacobian(self, u):
        na = self.na
        v = u[na:2 * na]
        return (np.sum(u[:na]) + u[-1]
                + np.sum(np.log(self.hi - self.lo) - np.logaddexp(0, -v) - np.logaddexp(0, v)))

    def __call__(self, u):
        sigma2, phi, tau2 = self.to_theta(u)
        params = ParamVector(np.zeros(self.spec.p + 1), sigma2, phi, tau2)
        lp = log_prior(params, self.priors, include_beta=False)
        if not np.isfinite(lp):
            return -np.inf, None
        K = marginal_cov(params, self.ds, self.spec, dist=self.dist, X=self.X)
        L = chol(K, scale=np.mean(np.diag(K)), name="marginal covariance")
        mean, pc, log_ev = beta_conditional(L, self.X, self.ds.y, self.priors)
        total = lp + self.log_jacobian(u) + (log_ev if self.likelihood else 0.0)
        if not np.isfinite(total):
            return -np.inf, None
        return total, (params, L, mean, pc)


def initial_theta(ds: Dataset, spec: ModelSpec, priors: Priors):
    """Residual variance split equally over tau2 and the processes; phi mid-support."""
    X = design_matrix(ds)
    _, s2 = ols(X, ds.y)
    s2 = max(s2, _resid_var_floor(ds.y))
    share = s2 / (len(spec.active) + 1)
    sigma2 = []
    for k in spec.active:
        m2 = float(np.mean(X[:, k] ** 2))
        sigma2.append(share / m2 if m2 > 0 else share)
    phi = [0.5 * (lo + hi) for lo, hi in priors.phi]
    return np.array(sigma2), np.array(phi), share


def _run_chain(ds, spec, priors, cfg: McmcConfig, chain, likelihood=True):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(chain,)))
    target = _Target(ds, spec, priors, likelihood)
    d = target.dim
    accept_target = cfg.target_accept or (0.44 if d == 1 else 0.234)

    u = target.to_u(*initial_theta(ds, spec, priors))
    u = u + cfg.init_jitter * rng.standard_normal(d)
    lp, cache = target(u)
    if not np.isfinite(lp):
        raise FloatingPointError(f"chain {chain}: non-finite log-posterior at initial values")

    log_scale = np.log(2.38 / np.sqrt(d))
    prop_chol = 0.1 * np.eye(d)
    run_mean, run_m2, n_seen = np.zeros(d), np.zeros((d, d)), 0
    cov_stop, shaped = int(0.75 * cfg.burn_in), False

    keep = cfg.draws_per_chain
    P = len(param_names(spec, ds.names))
    draws = np.empty((keep, P))
    logpost = np.empty(keep)
    acc_post = 0
    j = 0
    for t in range(cfg.n_iterations):
        z = rng.standard_normal(d)
        u_new = u + np.exp(log_scale) * (prop_chol @ z)
        lp_new, cache_new = target(u_new)
        log_ratio = lp_new - lp
        accepted = np.log(rng.random()) < log_ratio
        if accepted:
            u, lp, cache = u_new, lp_new, cache_new
        if t < cfg.burn_in:
            alpha = np.exp(min(0.0, log_ratio)) if np.isfinite(log_ratio) else 0.0
            log_scale += (alpha - accept_target) / (t + 1) ** 0.6
            n_seen += 1
            delta = u - run_mean
            run_mean += delta / n_seen
            run_m2 += np.outer(delta, u - run_mean)
            # the shape stops adapting early so the scale can settle to it
            if ((t + 1) % cfg.adapt_interval == 0 and n_seen >= 2 * cfg.adapt_interval
                    and t < cov_stop):
                S = run_m2 / (n_seen - 1) + 1e-10 * np.eye(d)
                try:
                    prop_chol = linalg.cholesky(S, lower=True)
                except linalg.LinAlgError:
                    continue
                if not shaped:
                    log_scale, shaped = np.log(2.38 / np.sqrt(d)), True
            continue
        acc_post += accepted
        if (t - cfg.burn_in) % cfg.thinning != cfg.thinning - 1:
            continue
        if j >= keep:
            continue
        params, L, mean, pc = cache
        beta = mean + linalg.solve_triangular(pc.T, rng.standard_normal(mean.size),
                                              lower=False, check_finite=False)
        params = ParamVector(beta, params.sigma2, params.phi, params.tau2)
        ll = gaussian_logpdf_chol(ds.y - target.X @ beta, L)
        draws[j] = params.to_array()
        logpost[j] = ll + log_prior(params, priors)
        j += 1
    rate = acc_post / (cfg.n_iterations - cfg.burn_in)
    return draws, logpost, rate


def run_mcmc(ds: Dataset, spec: ModelSpec, priors: Priors | None = None,
             cfg: McmcConfig = McmcConfig(), _likelihood=True) -> PosteriorSamples:
    """Sample the joint posterior of (beta, sigma2, phi, tau2).

    ``_likelihood=False`` samples the covariance parameters from the prior
    alone; it exists for testing the proposal and Jacobian machinery.
    """
    if spec.p != ds.p:
        raise ValueError(f"model has {spec.p} predictor indicators, dataset has {ds.p} predictors")
    ds.require_fit_size()
    priors = default_priors(ds, spec) if priors is None else priors
    if len(priors.sigma2) != len(spec.active):
        raise ValueError("priors do not match the number of spatial processes")
    args = [(ds, spec, priors, cfg, c, _likelihood) for c in range(cfg.n_chains)]
    if cfg.workers > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.n_chains)) as ex:
            results = list(ex.map(_run_chain_star, args))
    else:
        results = [_run_chain(*a) for a in args]
    rates = [float(r[2]) for r in results]
    for c, rate in enumerate(rates):
        if rate <= 0.0 or rate >= 1.0:
            warnings.warn(f"chain {c}: post burn-in acceptance rate {rate:.3f}; "
                          "proposal adaptation diverged", RuntimeWarning, stacklevel=2)
    draws = np.concatenate([r[0] for r in results])
    log_post = np.concatenate([r[1] for r in results])
    chain = np.repeat(np.arange(cfg.n_chains), cfg.draws_per_chain)
    return PosteriorSamples(draws, param_names(spec, ds.names), spec, ds.names, log_post, chain,
                            {"beta": [1.0] * cfg.n_chains, "covariance": rates}, priors)


def _run_chain_star(args):
    return _run_chain(*args)


def _as_chains(samples) -> np.ndarray:
    if isinstance(samples, PosteriorSamples):
        return samples.by_chain()
    arr = np.asarray(samples, dtype=float)
    return arr[..., None] if arr.ndim == 2 else arr


def gelman_rubin(samples) -> np.ndarray:
    """Potential scale reduction factor per parameter.

    ``samples`` is a :class:`PosteriorSamples` or an array shaped
    (chains, draws) or (chains, draws, parameters).
    """
    x = _as_chains(samples)
    m, n = x.shape[:2]
    if m < 2:
        raise ValueError("R-hat needs at least two chains")
    chain_means = x.mean(axis=1)
    B = n * chain_means.var(axis=0, ddof=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / W)
    return np.where(W > 0, rhat, np.where(B > 0, np.inf, 1.0))


def _autocorr(x):
    n = x.size
    x = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n]
    return acov / acov[0]


def _ess_1d(x):
    n = x.size
    if n < 4 or np.var(x) == 0:
        return 0.0
    rho = _autocorr(x)
    # Geyer's initial monotone positive sequence
    pairs = rho[: n - (n % 2)].reshape(-1, 2).sum(axis=1)
    stop = np.argmax(pairs <= 0) if np.any(pairs <= 0) else pairs.size
    pairs = np.minimum.accumulate(pairs[:stop])
    tau = -1.0 + 2.0 * pairs.sum()
    if tau <= 0:
        return float(n)
    return float(min(n / tau, n))


def effective_sample_size(samples) -> np.ndarray:
    """Effective sample size per parameter, summed over chains.

    Constant parameters get ESS 0 and a warning.  Values are capped at the
    number of draws.
    """
    x = _as_chains(samples)
    out = np.array([sum(_ess_1d(x[c, :, k]) for c in range(x.shape[0]))
                    for k in range(x.shape[2])])
    if np.any(out == 0):
        warnings.warn("constant chain(s): effective sample size set to 0", RuntimeWarning,
                      stacklevel=2)
    return out


def mc_standard_error(samples) -> np.ndarray:
    """Monte Carlo standard error of the posterior mean per parameter."""
    x = _as_chains(samples)
    flat = x.reshape(-1, x.shape[2])
    ess = effective_sample_size(x)
    with np.errstate(divide="ignore"):
        return flat.std(axis=0, ddof=1) / np.sqrt(ess)


_ROW_ORDER = {"beta0": 0, "beta": 1, "sigma2": 2, "phi": 3, "tau2": 4}


def _row_key(name):
    head, _, tail = name.partition("_")
    return _ROW_ORDER.get(head, 5), tail != "0"


def parameter_summary(samples: PosteriorSamples, level=0.95) -> dict:
    """Median and equal-tailed credible interval per parameter."""
    a = (1 - level) / 2
    out = {}
    for k, name in enumerate(samples.names):
        col = samples.draws[:, k]
        lo, med, hi = np.percentile(col, [100 * a, 50, 100 * (1 - a)])
        out[name] = (float(med), float(lo), float(hi))
    return out


def summary_table(fits: dict, level=0.95, digits=1) -> str:
    """Parameters by model as 'median (lower, upper)', one column per model."""
    summaries = {label: parameter_summary(s, level) for label, s in fits.items()}
    names = []
    for s in fits.values():
        names += [n for n in s.names if n not in names]
    names.sort(key=_row_key)
    cols = list(fits)
    cells = [[""] + cols]
    for n in names:
        row = [n]
        for c in cols:
            if n in summaries[c]:
                med, lo, hi = summaries[c][n]
                row.append(f"{med:.{digits}f} ({lo:.{digits}f}, {hi:.{digits}f})")
            else:
                row.append("")
        cells.append(row)
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in cells)
