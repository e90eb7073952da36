"""Spatially varying coefficient regression with the random effects integrated out.

The response at location s is

    y(s) = x(s)' beta + sum_k delta_k x_k(s) w_k(s) + eps(s)

where ``x_0 = 1`` is the intercept column and each active ``w_k`` is an
independent zero-mean Gaussian process with covariance
``sigma2_k * rho(d; phi_k, nu)``.  Marginally

    y ~ N(X beta, sum_k sigma2_k D_k R_k D_k + tau2 I),   D_k = diag(x_k),

which is the likelihood used everywhere in this package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, special

from .covariance import RANGE_THRESHOLD, chol, correlation, distance_matrix

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class Dataset:
    """Point-referenced observations.

    ``X`` holds the predictors only; the intercept column is added by
    :func:`design_matrix`.
    """

    coords: np.ndarray
    y: np.ndarray
    X: np.ndarray
    names: tuple = ()
    ids: tuple = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.y.shape[0]
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2) if n == 0 else \
            np.atleast_2d(np.asarray(self.coords, dtype=float))
        X = np.asarray(self.X, dtype=float)
        if X.size == 0 and X.ndim < 2:
            X = X.reshape(n, 0)
        self.X = X.reshape(n, -1) if X.ndim == 1 else X
        self.names = tuple(self.names) or tuple(f"x{j + 1}" for j in range(self.X.shape[1]))
        self.ids = tuple(self.ids) or tuple(str(i) for i in range(n))
        if self.coords.shape != (n, 2):
            raise ValueError(f"coords must be ({n}, 2), got {self.coords.shape}")
        if self.X.shape[0] != n:
            raise ValueError("X and y have different numbers of rows")
        if len(self.names) != self.X.shape[1]:
            raise ValueError("one name per predictor column required")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate predictor names")
        if len(self.ids) != n:
            raise ValueError("one id per observation required")
        for label, arr in (("coords", self.coords), ("y", self.y), ("X", self.X)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"missing or non-finite values in {label}")

    def require_fit_size(self):
        """Fitting needs a residual degree of freedom beyond the regression."""
        if self.n < self.p + 2:
            raise ValueError(f"need n >= p + 2 observations, got n={self.n}, p={self.p}")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, names: Sequence[str]) -> "Dataset":
        idx = _predictor_index(self, names)
        return Dataset(self.coords, self.y, self.X[:, idx],
                       tuple(self.names[i] for i in idx), self.ids)

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.coords[rows], self.y[rows], self.X[rows], self.names,
                       tuple(self.ids[i] for i in rows))

    def drop(self, i: int) -> "Dataset":
        return self.take(np.delete(np.arange(self.n), i))


def _predictor_index(ds, selected):
    selected = list(selected)
    if len(set(selected)) != len(selected):
        raise ValueError(f"duplicate predictor in selection {selected}")
    unknown = [s for s in selected if s not in ds.names]
    if unknown:
        raise KeyError(f"unknown predictor(s): {', '.join(unknown)}")
    # dataset order, independent of the order of the request
    return [i for i, name in enumerate(ds.names) if name in selected]


def design_matrix(ds: Dataset, selected=None) -> np.ndarray:
    """Intercept column followed by the selected predictors in dataset order."""
    if selected is None:
        cols = ds.X
    else:
        cols = ds.X[:, _predictor_index(ds, selected)]
    return np.column_stack([np.ones(ds.n), cols])


@dataclass(frozen=True)
class ModelSpec:
    """Which regression coefficients carry a spatial process.

    ``delta0`` switches the intercept process, ``delta[j]`` the process on
    predictor ``j``.
    """

    delta0: int
    delta: tuple
    nu: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "delta", tuple(int(d) for d in self.delta))
        if self.delta0 not in (0, 1) or any(d not in (0, 1) for d in self.delta):
            raise ValueError("indicators must be 0 or 1")
        if not self.nu > 0:
            raise ValueError("nu must be positive")

    @classmethod
    def non_spatial(cls, p, nu=0.5):
        return cls(0, (0,) * p, nu)

    @classmethod
    def svi(cls, p, nu=0.5):
        return cls(1, (0,) * p, nu)

    @classmethod
    def svc(cls, p, nu=0.5):
        return cls(1, (1,) * p, nu)

    @classmethod
    def from_name(cls, name, p, nu=0.5):
        key = name.lower().replace("-", "").replace("_", "")
        makers = {"nonspatial": cls.non_spatial, "svi": cls.svi, "svc": cls.svc}
        if key not in makers:
            raise ValueError(f"unknown model {name!r}; expected nonspatial, svi or svc")
        return makers[key](p, nu)

    @property
    def p(self) -> int:
        return len(self.delta)

    @property
    def active(self) -> tuple:
        """Design-column indices (0 = intercept) that carry a process."""
        return tuple(k for k, d in enumerate((self.delta0,) + self.delta) if d)

    @property
    def is_spatial(self) -> bool:
        return bool(self.active)

    @property
    def label(self) -> str:
        if not self.is_spatial:
            return "nonspatial"
        if self.active == (0,):
            return "svi"
        if len(self.active) == self.p + 1:
            return "svc"
        return "mixed_" + "".join(str(d) for d in (self.delta0,) + self.delta)


def process_labels(spec: ModelSpec, names) -> list:
    labels = ["0"] + list(names)
    return [labels[k] for k in spec.active]


@dataclass
class ParamVector:
    """One joint value of all model parameters.

    ``beta`` includes the intercept at position 0; ``sigma2`` and ``phi``
    are ordered like ``spec.active``.
    """

    beta: np.ndarray
    sigma2: np.ndarray
    phi: np.ndarray
    tau2: float

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        self.phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        self.tau2 = float(self.tau2)
        if self.sigma2.shape != self.phi.shape:
            raise ValueError("sigma2 and phi must have one entry per process")

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.beta, self.sigma2, self.phi, [self.tau2]])

    @classmethod
    def from_array(cls, arr, spec: ModelSpec):
        arr = np.asarray(arr, dtype=float)
        nb, na = spec.p + 1, len(spec.active)
        if arr.shape != (nb + 2 * na + 1,):
            raise ValueError(f"expected {nb + 2 * na + 1} values, got {arr.shape}")
        return cls(arr[:nb], arr[nb:nb + na], arr[nb + na:nb + 2 * na], arr[-1])

    def check(self, spec: ModelSpec):
        if self.beta.shape != (spec.p + 1,) or self.sigma2.shape != (len(spec.active),):
            raise ValueError(f"parameter layout does not match model {spec.label}")

    def is_valid(self) -> bool:
        return bool(self.tau2 > 0 and np.all(self.sigma2 > 0) and np.all(self.phi > 0)
                    and np.all(np.isfinite(self.to_array())))


def param_names(spec: ModelSpec, names) -> list:
    out = ["beta0"] + [f"beta_{n}" for n in names]
    procs = process_labels(spec, names)
    out += [f"sigma2_{k}" for k in procs]
    out += [f"phi_{k}" for k in procs]
    return out + ["tau2"]


@dataclass
class Priors:
    """Prior hyperparameters.

    ``beta`` is ``None`` for a flat prior, otherwise a ``(mean, variance)``
    pair of arrays for independent Normal priors.  ``sigma2`` and ``phi``
    hold one ``(shape, scale)`` / ``(lower, upper)`` pair per process.
    """

    sigma2: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    tau2: tuple = (2.0, 1.0)
    beta: tuple | None = None

    def __post_init__(self):
        self.sigma2 = [tuple(map(float, s)) for s in self.sigma2]
        self.phi = [tuple(map(float, s)) for s in self.phi]
        self.tau2 = tuple(map(float, self.tau2))
        if len(self.sigma2) != len(self.phi):
            raise ValueError("need one sigma2 and one phi prior per process")
        for a, b in self.sigma2 + [self.tau2]:
            if not (np.isfinite(a) and np.isfinite(b) and a > 0 and b > 0):
                raise ValueError(f"inverse-gamma hyperparameters must be positive, got {(a, b)}")
        for lo, hi in self.phi:
            if not (np.isfinite(lo) and np.isfinite(hi) and 0 < lo < hi):
                raise ValueError(f"uniform support must satisfy 0 < lower < upper, got {(lo, hi)}")
        if self.beta is not None:
            m, v = (np.atleast_1d(np.asarray(a, dtype=float)) for a in self.beta)
            if m.shape != v.shape or np.any(v <= 0) or not np.all(np.isfinite(m)):
                raise ValueError("Normal beta prior needs matching means and positive variances")
            self.beta = (m, v)


def ols(X, y):
    """Least-squares coefficients and residual variance (denominator n - p)."""
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(len(y) - X.shape[1], 1)
    return coef, float(resid @ resid) / dof


def _resid_var_floor(y):
    return 1e-8 * max(1.0, float(np.var(y)), float(np.mean(y) ** 2))


def phi_support(coords, threshold=RANGE_THRESHOLD, quantiles=(1.0, 99.0)):
    """Uniform support for phi from the 1st/99th percentile interpoint distances."""
    d = distance_matrix(coords)
    d = d[np.triu_indices_from(d, k=1)]
    d = d[d > 0]
    if d.size == 0:
        raise ValueError("need at least two distinct locations")
    d_lo, d_hi = np.percentile(d, quantiles)
    if not d_hi > d_lo:
        d_lo, d_hi = d_lo * 0.5, d_hi * 2.0
    return -np.log(threshold) / d_hi, -np.log(threshold) / d_lo


def default_priors(ds: Dataset, spec: ModelSpec, shape=2.0) -> Priors:
    """Weakly informative defaults.

    Variances get IG(2, 0.5 * OLS residual variance).  For a slope process
    the scale is divided by ``mean(x_k^2)`` so that ``x_k^2 sigma2_k`` is on
    the response scale.  phi is uniform between the decays giving effective
    ranges equal to the 99th and 1st percentile of interpoint distances.
    """
    ds.require_fit_size()
    X = design_matrix(ds)
    _, s2 = ols(X, ds.y)
    s2 = max(s2, _resid_var_floor(ds.y))
    base = 0.5 * s2
    sig = []
    for k in spec.active:
        m2 = float(np.mean(X[:, k] ** 2))
        sig.append((shape, base / m2 if m2 > 0 else base))
    phis = [phi_support(ds.coords)] * len(spec.active) if spec.is_spatial else []
    return Priors(sigma2=sig, phi=phis, tau2=(shape, base))


def marginal_cov(params: ParamVector, ds: Dataset, spec: ModelSpec, dist=None, X=None):
    """Covariance of y with all active processes integrated out."""
    X = design_matrix(ds) if X is None else X
    n = X.shape[0]
    K = np.zeros((n, n))
    if spec.is_spatial:
        dist = distance_matrix(ds.coords) if dist is None else dist
        for k, s2, ph in zip(spec.active, params.sigma2, params.phi):
            if s2 == 0:
                continue
            x = X[:, k]
            K += s2 * (np.outer(x, x) * correlation(dist, ph, spec.nu))
    K[np.diag_indices(n)] += params.tau2
    return K


def gaussian_logpdf_chol(r, L):
    """log N(r; 0, L L') from a lower Cholesky factor."""
    z = linalg.solve_triangular(L, r, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (r.size * LOG_2PI + logdet + z @ z)


def marginal_loglik(params: ParamVector, ds: Dataset, spec: ModelSpec, dist=None) -> float:
    """Exact log density of y given all parameters, w integrated out."""
    params.check(spec)
    X = design_matrix(ds)
    K = marginal_cov(params, ds, spec, dist=dist, X=X)
    L = chol(K, scale=np.mean(np.diag(K)), name="marginal covariance")
    return float(gaussian_logpdf_chol(ds.y - X @ params.beta, L))


def log_invgamma(x, shape, scale):
    return shape * np.log(scale) - special.gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x


def log_prior(params: ParamVector, priors: Priors, include_beta=True) -> float:
    if not params.is_valid():
        return -np.inf
    lp = log_invgamma(params.tau2, *priors.tau2)
    for s2, (a, b) in zip(params.sigma2, priors.sigma2):
        lp += log_invgamma(s2, a, b)
    for ph, (lo, hi) in zip(params.phi, priors.phi):
        if not lo <= ph <= hi:
            return -np.inf
        lp -= np.log(hi - lo)
    if include_beta and priors.beta is not None:
        m, v = priors.beta
        r = params.beta - m
        lp += float(np.sum(-0.5 * (LOG_2PI + np.log(v) + r * r / v)))
    return float(lp)


def log_posterior(params: ParamVector, ds: Dataset, spec: ModelSpec, priors: Priors,
                  dist=None) -> float:
    """Unnormalized log posterior; ``-inf`` outside the prior support."""
    lp = log_prior(params, priors)
    if not np.isfinite(lp):
        return -np.inf
    return marginal_loglik(params, ds, spec, dist=dist) + lp


def beta_conditional(L, X, y, priors: Priors):
    """Gaussian conditional of beta given the covariance parameters.

    Parameters
    ----------
    L : ndarray
        Lower Cholesky factor of the marginal covariance of y.

    Returns
    -------
    mean : ndarray
    prec_chol : ndarray
        Lower Cholesky factor of the conditional precision.
    log_evidence : float
        ``log p(y | covariance parameters)`` with beta integrated out.  For a
        flat prior this is the restricted likelihood up to ``+p/2 log 2 pi``.
    """
    Xs = linalg.solve_triangular(L, X, lower=True, check_finite=False)
    ys = linalg.solve_triangular(L, y, lower=True, check_finite=False)
    prec = Xs.T @ Xs
    rhs = Xs.T @ ys
    if priors.beta is not None:
        m, v = priors.beta
        prec = prec + np.diag(1.0 / v)
        rhs = rhs + m / v
    prec_chol = chol(prec, name="beta conditional precision")
    mean = linalg.cho_solve((prec_chol, True), rhs, check_finite=False)
    # p(y) = p(y | b) p(b) / p(b | y) evaluated at b = mean
    resid = ys - Xs @ mean
    logdet_K = 2.0 * np.sum(np.log(np.diag(L)))
    log_lik = -0.5 * (y.size * LOG_2PI + logdet_K + resid @ resid)
    log_cond = -0.5 * X.shape[1] * LOG_2PI + np.sum(np.log(np.diag(prec_chol)))
    log_ev = log_lik - log_cond
    if priors.beta is not None:
        m, v = priors.beta
        r = mean - m
        log_ev += float(np.sum(-0.5 * (LOG_2PI + np.log(v) + r * r / v)))
    return mean, prec_chol, float(log_ev)
