"""Moments of the augmentation distributions.

Polya-Gamma (PG), Polya-inverse-Gamma (P-IG) and Power-Truncated-Normal (PTN)
quantities used by the variational updates, plus the PG -> Gamma moment match.
All functions broadcast over numpy arrays.
"""
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import NumericalError

EULER_GAMMA = float(np.euler_gamma)

# Branch switch-over points for the small-argument series.
PG_MEAN_SMALL_C = 1e-6
PG_VAR_SMALL_C = 1e-4
MATCH_FLOOR_C = 1e-4
PIG_SMALL_T = 1e-6

_ZETA3 = 1.2020569031595942


@dataclass(frozen=True)
class PGParams:
    b: float
    c: float = 0.0

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"PG shape must be positive, got {self.b}")
        object.__setattr__(self, "c", abs(float(self.c)))


@dataclass(frozen=True)
class GammaParams:
    shape: float
    rate: float

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def variance(self):
        return self.shape / self.rate**2


@dataclass(frozen=True)
class PTNParams:
    """Density proportional to ``r**(p-1) * exp(b_lin*r - a*r**2)`` on r > 0."""

    p: float
    a: float
    b_lin: float

    def __post_init__(self):
        if not (self.p > 0 and self.a > 0 and np.isfinite(self.b_lin)):
            raise ValueError(f"invalid PTN parameters {self}")


def _sinh_minus_x(x):
    """sinh(x) - x without cancellation at small x."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 1.0
    xs = x[small]
    x2 = xs * xs
    # Horner over x^3 * sum_k x^(2k) / (2k+3)!
    acc = np.zeros_like(xs)
    for k in range(10, -1, -1):
        acc = acc * x2 + 1.0 / special.factorial(2 * k + 3, exact=False)
    out[small] = xs * x2 * acc
    out[~small] = np.sinh(x[~small]) - x[~small]
    return out


def _match_ratios(c):
    """Return (alpha/b, beta) of the Gamma matched to PG(b, c), for c >= floor."""
    c = np.asarray(c, dtype=float)
    s = np.empty_like(c)
    beta = np.empty_like(c)
    big = c > 30.0
    cm = c[~big]
    smc = _sinh_minus_x(cm)
    s[~big] = cm * np.sinh(0.5 * cm) ** 2 / smc
    beta[~big] = cm * cm * np.sinh(cm) / smc
    cb = c[big]
    e1 = np.exp(-cb)
    e2 = e1 * e1
    # (cosh c - 1) / (sinh c - c) and sinh c / (sinh c - c) scaled by e^{-c}
    s[big] = 0.5 * cb * (1.0 + e2 - 2.0 * e1) / (1.0 - e2 - 2.0 * cb * e1)
    beta[big] = cb * cb * (1.0 - e2) / (1.0 - e2 - 2.0 * cb * e1)
    return s, beta


def pg_mean(b, c):
    """Mean of PG(b, c): ``b * tanh(c/2) / (2c)``."""
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    safe = np.where(c < PG_MEAN_SMALL_C, 1.0, c)
    out = np.where(c < PG_MEAN_SMALL_C, 0.25, np.tanh(0.5 * safe) / (2.0 * safe))
    return b * out


def pg_variance(b, c):
    """Variance of PG(b, c)."""
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    shape = np.broadcast(b, c).shape
    c = np.broadcast_to(c, shape).ravel()
    out = np.empty_like(c)
    small = c < PG_VAR_SMALL_C
    out[small] = (1.0 - 0.2 * c[small] ** 2) / 24.0
    big = c > 30.0
    mid = ~small & ~big
    cm = c[mid]
    out[mid] = _sinh_minus_x(cm) / (4.0 * cm**3 * np.cosh(0.5 * cm) ** 2)
    cb = c[big]
    e1 = np.exp(-cb)
    # (sinh c - c) / cosh^2(c/2) = 2(1 - e^{-2c} - 2c e^{-c}) / (1 + e^{-c})^2
    out[big] = 2.0 * (1.0 - e1 * e1 - 2.0 * cb * e1) / (1.0 + e1) ** 2 / (4.0 * cb**3)
    return b * out.reshape(shape)


def log_cosh(x):
    x = np.abs(np.asarray(x, dtype=float))
    return x + np.log1p(np.exp(-2.0 * x)) - np.log(2.0)


def pg_laplace(b, t):
    """Laplace transform of PG(b, 0) at t: ``cosh(sqrt(t/2))**(-b)``."""
    b = np.asarray(b, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("Laplace argument must be non-negative")
    return np.exp(-b * log_cosh(np.sqrt(0.5 * t)))


def pg_match_shape_slope(c):
    """d alpha / d b of the matched Gamma, i.e. ``alpha(b, c) / b``."""
    c = np.abs(np.asarray(c, dtype=float))
    shape = c.shape
    c = c.ravel()
    s = np.full_like(c, 1.5)
    lo = c < MATCH_FLOOR_C
    s[lo] = 1.5 * (1.0 + c[lo] ** 2 / 30.0)
    if np.any(~lo):
        s[~lo] = _match_ratios(c[~lo])[0]
    return s.reshape(shape)


def pg_moment_match_gamma(b, c):
    """Shape and rate of the Gamma with the same mean and variance as PG(b, c).

    Returns
    -------
    alpha, beta : ndarray
        ``alpha/beta`` equals :func:`pg_mean` and ``alpha/beta**2`` equals
        :func:`pg_variance`. Below ``MATCH_FLOOR_C`` the second-order series
        in ``c`` replaces the 0/0 closed forms.
    """
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    shape = np.broadcast(b, c).shape
    cf = np.broadcast_to(c, shape).ravel()
    s = np.empty_like(cf)
    beta = np.empty_like(cf)
    lo = cf < MATCH_FLOOR_C
    c2 = cf[lo] ** 2
    s[lo] = 1.5 * (1.0 + c2 / 30.0)
    beta[lo] = 6.0 * (1.0 + 7.0 * c2 / 60.0)
    if np.any(~lo):
        s[~lo], beta[~lo] = _match_ratios(cf[~lo])
    return b * s.reshape(shape), beta.reshape(shape)


def pig_mean(t):
    """Mean of the P-IG distribution with tilt t: ``(psi(t+1) - psi(1)) / (2t)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("P-IG tilt must be non-negative")
    safe = np.where(t < PIG_SMALL_T, 1.0, t)
    general = (special.digamma(safe + 1.0) + EULER_GAMMA) / (2.0 * safe)
    series = np.pi**2 / 12.0 - 0.5 * _ZETA3 * t + np.pi**4 * t * t / 180.0
    return np.where(t < PIG_SMALL_T, series, general)


def sample_pg(b, c, size, rng, n_terms=200):
    """Draw PG(b, c) variates from the truncated sum-of-Gammas series.

    Only used to build test oracles; inference never samples.
    """
    k = np.arange(1, n_terms + 1)
    denom = (k - 0.5) ** 2 + c * c / (4.0 * np.pi**2)
    g = rng.gamma(b, 1.0, size=(size, n_terms))
    return (g / denom).sum(axis=1) / (2.0 * np.pi**2)


def _ptn_logdens_u(u, p, a, b):
    with np.errstate(over="ignore"):
        r = np.exp(u)
        # r * (b - a r) stays -inf rather than inf - inf when r overflows
        return p * u + r * (b - a * r)


def ptn_moments(params, window=12.0, epsabs=1e-10):
    """E[r], E[r^2] and E[log r] under a PTN density.

    Integration runs in ``u = log r`` where the density is unimodal. The mode
    and Laplace width locate a +/- ``window`` standard-deviation core; the two
    tails are integrated separately so small ``p`` stays exact.
    """
    p, a, b = float(params.p), float(params.a), float(params.b_lin)
    # mode of p*u + b e^u - a e^{2u}:  2a r^2 - b r - p = 0
    r_star = (b + np.sqrt(b * b + 8.0 * a * p)) / (4.0 * a)
    if not (np.isfinite(r_star) and r_star > 0):
        # b very negative: 2a r^2 - b r - p with cancellation in the numerator
        r_star = 2.0 * p / (-b + np.sqrt(b * b + 8.0 * a * p))
    u_star = np.log(r_star)
    sd = 1.0 / np.sqrt(p + 2.0 * a * r_star * r_star)
    g0 = _ptn_logdens_u(u_star, p, a, b)

    def dens(z, power=0):
        # r^power times the density, relative to the mode, in log space
        return np.exp(_ptn_logdens_u(u_star + sd * z, p, a, b) - g0 + power * sd * z)

    integrands = (
        dens,
        lambda z: dens(z, 1),
        lambda z: dens(z, 2),
        lambda z: dens(z) * z,
    )
    vals = []
    for f in integrands:
        total = 0.0
        for lo, hi in ((-np.inf, -window), (-window, window), (window, np.inf)):
            val, err = integrate.quad(f, lo, hi, epsabs=epsabs, epsrel=1e-12, limit=200)
            if not np.isfinite(val):
                raise NumericalError(f"PTN quadrature diverged for {params}")
            total += val
        vals.append(total)
    z0, z1, z2, zu = vals
    if not z0 > 0:
        raise NumericalError(f"PTN normaliser vanished for {params}")
    mean = r_star * z1 / z0
    second = r_star * r_star * z2 / z0
    log_mean = u_star + sd * zu / z0
    return mean, second, log_mean
