"""Isotropic correlation kernels and dense covariance utilities.

All distances are Euclidean in a projected plane with km units, so decay
parameters ``phi`` are in 1/km.

The Matérn family follows the form

    rho(d) = (phi d)^nu K_nu(phi d) / (2^(nu - 1) Gamma(nu))

with no sqrt(2 nu) rescaling of ``phi``.  Under this convention the
half-integer members have the closed forms

    nu = 0.5:  exp(-x)
    nu = 1.5:  (1 + x) exp(-x)
    nu = 2.5:  (1 + x + x^2 / 3) exp(-x)

with ``x = phi d``.  Those shortcuts are used when ``nu`` hits one of these
values exactly; every other ``nu`` goes through the Bessel function.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg, special
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

#: threshold used for the effective spatial range
RANGE_THRESHOLD = 0.05

JITTER_START = 1e-10
JITTER_MAX = 1e-4


class Location(NamedTuple):
    """Planar location in km."""

    x: float
    y: float


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a covariance matrix cannot be factored even with jitter."""


@dataclass(frozen=True)
class CovarianceParams:
    sigma2: float
    phi: float
    nu: float = 0.5

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        _check_phi(self.phi)
        _check_nu(self.nu)


def _check_phi(phi):
    if not np.all(np.asarray(phi) > 0):
        raise ValueError(f"phi must be positive, got {phi}")


def _check_nu(nu):
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")


def distance(a, b) -> float:
    """Euclidean distance between two locations (km)."""
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def distance_matrix(a, b=None) -> np.ndarray:
    """Pairwise distances between the rows of coordinate arrays ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    return cdist(a, b)


def exponential_corr(d, phi):
    """exp(-phi d)."""
    _check_phi(phi)
    d = np.asarray(d, dtype=float)
    return np.exp(-phi * d)


def _matern_bessel(d, phi, nu):
    # literal Bessel-function evaluation; d == 0 handled as the limit 1
    d = np.asarray(d, dtype=float)
    x = phi * d
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        val = xp**nu * special.kv(nu, xp) / (2.0 ** (nu - 1.0) * special.gamma(nu))
    # kv underflows to 0 for large arguments, leaving 0 or nan from 0 * inf
    val = np.where(np.isfinite(val), val, 0.0)
    out[pos] = val
    return out


def matern_corr(d, phi, nu=0.5):
    """Matérn correlation at distance ``d``.

    Parameters
    ----------
    d : array_like
        Distances in km, nonnegative.
    phi : float
        Decay in 1/km.
    nu : float
        Smoothness.  0.5 gives the exponential kernel.
    """
    _check_phi(phi)
    _check_nu(nu)
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    x = phi * d
    if nu == 0.5:
        return np.exp(-x)
    if nu == 1.5:
        return (1.0 + x) * np.exp(-x)
    if nu == 2.5:
        return (1.0 + x + x * x / 3.0) * np.exp(-x)
    return _matern_bessel(d, phi, nu)


def correlation(d, phi, nu=0.5):
    if nu == 0.5:
        return np.exp(-phi * np.asarray(d, dtype=float))
    return matern_corr(d, phi, nu)


def effective_range(phi, threshold=RANGE_THRESHOLD):
    """Distance (km) at which the exponential correlation falls to ``threshold``."""
    _check_phi(phi)
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return -np.log(threshold) / np.asarray(phi, dtype=float)


def build_cov(locs, params: CovarianceParams) -> np.ndarray:
    """Covariance matrix ``sigma2 * rho(d_ij)`` over a set of locations."""
    locs = np.atleast_2d(np.asarray(locs, dtype=float))
    if locs.shape[0] < 1:
        raise ValueError("need at least one location")
    d = distance_matrix(locs)
    if locs.shape[0] > 1:
        off = d[~np.eye(len(d), dtype=bool)]
        if np.any(off == 0):
            log.warning("duplicate locations: covariance matrix is singular "
                        "and will rely on jitter when factored")
    return params.sigma2 * correlation(d, params.phi, params.nu)


def cross_cov(locs_a, locs_b, params: CovarianceParams) -> np.ndarray:
    """Rectangular covariance between two location sets."""
    d = distance_matrix(locs_a, locs_b)
    return params.sigma2 * correlation(d, params.phi, params.nu)


def chol(S, scale=None, name="covariance matrix") -> np.ndarray:
    """Lower Cholesky factor with bounded diagonal jitter on failure.

    Jitter starts at ``1e-10 * scale`` and grows tenfold up to
    ``1e-4 * scale``.  ``scale`` defaults to the mean diagonal of ``S``.
    """
    S = np.asarray(S, dtype=float)
    try:
        return linalg.cholesky(S, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    if not np.all(np.isfinite(S)):
        raise NotPositiveDefiniteError(f"{name} has non-finite entries")
    if scale is None:
        scale = float(np.mean(np.abs(np.diag(S))))
    if not scale > 0:
        scale = 1.0
    eye = np.eye(S.shape[0])
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            L = linalg.cholesky(S + jitter * scale * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter *= 10.0
            continue
        log.debug("%s factored with jitter %.1e x %.3g", name, jitter, scale)
        return L
    raise NotPositiveDefiniteError(
        f"{name} ({S.shape[0]}x{S.shape[0]}) is not positive definite "
        f"after jitter up to {JITTER_MAX:g} x {scale:.3g}"
    )
