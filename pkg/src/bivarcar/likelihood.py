"""Observation-error models.

Gaussian errors for the first outcome and a skew-normal reparameterised
to have mean zero and variance ``omega`` for the second. The skewness
transform ``gamma1`` and a penalised-complexity prior on the shape ``alpha``
live here as well.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.interpolate import PchipInterpolator
from scipy.special import log_ndtr

LOG_2PI = math.log(2.0 * math.pi)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GAMMA1_SUP = 0.5 * (4.0 - math.pi) * (2.0 / (math.pi - 2.0)) ** 1.5

PC_ALPHA_MAX = 30.0
PC_GRID_SIZE = 512


@dataclass(frozen=True)
class SkewNormalSpec:
    omega: float
    alpha: float
    m: float
    s: float

    @property
    def gamma1(self) -> float:
        return gamma1_of_alpha(self.alpha)

    @classmethod
    def from_moments(cls, omega: float, alpha: float) -> "SkewNormalSpec":
        m, s = sn_standardize(omega, alpha)
        return cls(omega=float(omega), alpha=float(alpha), m=m, s=s)


def sn_delta(alpha):
    return alpha / np.sqrt(1.0 + np.square(alpha))


def sn_standardize(omega: float, alpha: float) -> tuple[float, float]:
    """Location and scale giving a skew-normal with mean 0 and variance ``omega``."""
    if not omega > 0:
        raise ValueError(f"variance omega must be positive, got {omega}")
    d = float(sn_delta(alpha))
    s = math.sqrt(omega / (1.0 - 2.0 * d * d / math.pi))
    m = -s * d * SQRT_2_OVER_PI
    return m, s


def sn_logpdf(x, spec: SkewNormalSpec | None = None, *, m=None, s=None, alpha=None):
    """log[2/s phi((x-m)/s) Phi(alpha (x-m)/s)], vectorised over ``x``."""
    if spec is not None:
        m, s, alpha = spec.m, spec.s, spec.alpha
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("sn_logpdf requires finite x")
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    u = (x - m) / s
    return math.log(2.0) - math.log(s) - 0.5 * LOG_2PI - 0.5 * u * u + log_ndtr(alpha * u)


def inv_mills(u):
    """phi(u) / Phi(u), stable for large negative u."""
    u = np.asarray(u, dtype=float)
    return np.exp(-0.5 * u * u - 0.5 * LOG_2PI - log_ndtr(u))


def sn_derivs(r, m, s, alpha):
    """Log-density of residuals ``r`` and its first two derivatives in r."""
    u = (r - m) / s
    au = alpha * u
    h = inv_mills(au)
    ll = math.log(2.0) - math.log(s) - 0.5 * LOG_2PI - 0.5 * u * u + log_ndtr(au)
    d1 = (-u + alpha * h) / s
    d2 = (-1.0 - alpha * alpha * h * (au + h)) / (s * s)
    return ll, d1, d2


def sn_sample(rng: np.random.Generator, size, spec: SkewNormalSpec) -> np.ndarray:
    """Draw via the additive representation delta|U0| + sqrt(1-delta^2) U1."""
    d = float(sn_delta(spec.alpha))
    u0 = np.abs(rng.standard_normal(size))
    u1 = rng.standard_normal(size)
    return spec.m + spec.s * (d * u0 + math.sqrt(1.0 - d * d) * u1)


# -- skewness ------------------------------------------------------------------


def gamma1_of_alpha(alpha):
    """Skewness of a skew-normal with shape ``alpha``; sign follows alpha."""
    a = np.asarray(alpha, dtype=float)
    u = 2.0 * a * a / (math.pi * (1.0 + a * a))
    g = 0.5 * (4.0 - math.pi) * u**1.5 / (1.0 - u) ** 1.5
    g = np.sign(a) * g
    return float(g) if np.ndim(g) == 0 else g


def alpha_of_gamma1(gamma1):
    """Inverse of :func:`gamma1_of_alpha` (closed form through delta)."""
    g = np.asarray(gamma1, dtype=float)
    if np.any(np.abs(g) >= GAMMA1_SUP):
        raise ValueError(f"|gamma1| must be below {GAMMA1_SUP:.6f}")
    q = (2.0 * np.abs(g) / (4.0 - math.pi)) ** (2.0 / 3.0)
    u = q / (1.0 + q)
    d2 = 0.5 * math.pi * u
    a = np.sign(g) * np.sqrt(d2 / (1.0 - d2))
    return float(a) if np.ndim(a) == 0 else a


# -- penalised-complexity prior on alpha ---------------------------------------


def _kld_to_normal(alpha: float) -> float:
    """KL divergence of the unit-variance centred skew-normal from N(0, 1)."""
    if alpha == 0.0:
        return 0.0
    m, s = sn_standardize(1.0, alpha)

    def integrand(x):
        lf = sn_logpdf(x, m=m, s=s, alpha=alpha)
        lphi = -0.5 * x * x - 0.5 * LOG_2PI
        return math.exp(lf) * (lf - lphi)

    # the density is concentrated on the side of the skew and falls off like a
    # half-normal edge on the other side; split the range at the edge
    edge = m
    val = 0.0
    for a, b in ((-40.0, edge - 1.0), (edge - 1.0, edge + 1.0), (edge + 1.0, 40.0)):
        v, _ = integrate.quad(integrand, a, b, limit=200, epsabs=1e-16, epsrel=1e-12)
        val += v
    return max(val, 0.0)


class PCPriorAlpha:
    """Penalised-complexity prior for the skew-normal shape.

    The distance from the Gaussian base model is d(alpha) = sqrt(2 KLD), with
    both distributions standardised to mean 0 and variance 1. The distance is
    tabulated on a grid in |alpha| and interpolated through its cube root,
    which is smooth at the origin (d grows like |alpha|^3 there).

    The density is exponential in d with rate ``lam`` and is renormalised to
    the tabulated range |alpha| <= ``alpha_max``.
    """

    def __init__(self, lam: float = 4.0, alpha_max: float = PC_ALPHA_MAX, size: int = PC_GRID_SIZE):
        if not lam > 0:
            raise ValueError(f"rate must be positive, got {lam}")
        self.lam = float(lam)
        self.alpha_max = float(alpha_max)
        grid, r = _distance_table(self.alpha_max, size)
        self.grid = grid
        self.root = r
        self._r = PchipInterpolator(grid, r)
        self._dr = self._r.derivative()
        self._inv = PchipInterpolator(r, grid)
        self.d_max = float(r[-1] ** 3)
        self.log_norm = math.log1p(-math.exp(-self.lam * self.d_max))

    def distance(self, alpha):
        a = np.minimum(np.abs(np.asarray(alpha, dtype=float)), self.alpha_max)
        return self._r(a) ** 3

    def distance_deriv(self, alpha):
        """d'(|alpha|), by differentiating the interpolant."""
        a = np.minimum(np.abs(np.asarray(alpha, dtype=float)), self.alpha_max)
        return 3.0 * self._r(a) ** 2 * self._dr(a)

    def alpha_of_distance(self, t):
        """Signed inverse: alpha with sign(t) and d(alpha) = |t|."""
        t = np.asarray(t, dtype=float)
        r = np.cbrt(np.minimum(np.abs(t), self.d_max))
        a = np.sign(t) * self._inv(r)
        return float(a) if np.ndim(a) == 0 else a

    def logdensity(self, alpha):
        a = np.asarray(alpha, dtype=float)
        with np.errstate(divide="ignore"):
            out = (
                math.log(self.lam / 2.0)
                - self.lam * self.distance(a)
                + np.log(np.abs(self.distance_deriv(a)))
                - self.log_norm
            )
        out = np.where(np.abs(a) > self.alpha_max, -np.inf, out)
        return float(out) if np.ndim(out) == 0 else out

    def logdensity_distance(self, t):
        """Log-density of the signed distance t = sign(alpha) d(alpha)."""
        t = np.asarray(t, dtype=float)
        out = math.log(self.lam / 2.0) - self.lam * np.abs(t) - self.log_norm
        out = np.where(np.abs(t) > self.d_max, -np.inf, out)
        return float(out) if np.ndim(out) == 0 else out


@lru_cache(maxsize=4)
def _distance_table(alpha_max: float, size: int) -> tuple[np.ndarray, np.ndarray]:
    grid = np.concatenate([[0.0], np.logspace(-3, math.log10(alpha_max), size - 1)])
    d = np.array([math.sqrt(2.0 * _kld_to_normal(float(a))) for a in grid])
    r = np.cbrt(d)
    # tiny alphas: KLD is below quadrature resolution; d ~ c alpha^3 there, so
    # the cube root is linear and can be extended from the first resolved knot
    ok = np.flatnonzero((grid >= 0.05) & (r > 0))[0]
    slope = r[ok] / grid[ok]
    small = grid < grid[ok]
    r[small] = slope * grid[small]
    r = np.maximum.accumulate(r)
    return grid, r


@lru_cache(maxsize=8)
def pc_prior(lam: float = 4.0) -> PCPriorAlpha:
    """Shared, lazily-built prior instance for rate ``lam``."""
    return PCPriorAlpha(lam)


def pc_prior_alpha_logdensity(alpha, lam: float = 4.0):
    return pc_prior(float(lam)).logdensity(alpha)


# -- vague priors --------------------------------------------------------------


def log_gamma_prior_on_precision(log_omega, shape: float = 1e-3, rate: float = 1e-3):
    """Log-density of v = log(omega) when 1/omega ~ Gamma(shape, rate)."""
    v = np.asarray(log_omega, dtype=float)
    return shape * math.log(rate) - math.lgamma(shape) - shape * v - rate * np.exp(-v)
