"""Model-comparison criteria computed from posterior log-likelihood draws.

Every function takes an S x n matrix ``ll`` with ``ll[s, i]`` the
log-likelihood of observation i under posterior draw s.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp

PARETO_K_THRESHOLD = 0.7


def _check(ll) -> np.ndarray:
    ll = np.asarray(ll, dtype=float)
    if ll.ndim == 1:
        ll = ll[:, None]
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ValueError("need an S x n log-likelihood matrix with at least two draws")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log-likelihood draws must be finite")
    return ll


def lppd_pointwise(ll) -> np.ndarray:
    ll = _check(ll)
    return logsumexp(ll, axis=0) - math.log(ll.shape[0])


@dataclass(frozen=True)
class WaicResult:
    waic: float
    lppd: float
    p_waic: float


def waic(ll) -> WaicResult:
    """-2 (lppd - p_waic) with p_waic the summed posterior variance of ll."""
    ll = _check(ll)
    lppd = float(np.sum(lppd_pointwise(ll)))
    p = float(np.sum(np.var(ll, axis=0, ddof=1)))
    return WaicResult(waic=-2.0 * (lppd - p), lppd=lppd, p_waic=p)


@dataclass(frozen=True)
class DicResult:
    dic: float
    expected_deviance: float
    p_d: float


def dic(ll, ll_at_mean) -> DicResult:
    """Expected deviance plus p_D = Dbar - D(theta_bar)."""
    ll = _check(ll)
    dbar = -2.0 * float(np.mean(np.sum(ll, axis=1)))
    dhat = -2.0 * float(np.sum(ll_at_mean))
    p_d = dbar - dhat
    return DicResult(dic=dbar + p_d, expected_deviance=dbar, p_d=p_d)


# -- CPO -----------------------------------------------------------------------


def gpd_fit(x: np.ndarray) -> tuple[float, float]:
    """Generalised Pareto (k, sigma) for exceedances ``x`` > 0; k > 0 is a heavy tail.

    Empirical-Bayes estimator of Zhang and Stephens (2009) with the
    weakly-informative shrinkage of k towards 0.5 used for importance ratios.
    """
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    m = 30 + int(math.sqrt(n))
    prior = 3.0
    j = np.arange(1, m + 1)
    q1 = x[max(int(n / 4.0 + 0.5) - 1, 0)]
    if q1 <= 0:
        return math.inf, 0.0
    b = 1.0 / x[-1] + (1.0 - np.sqrt(m / (j - 0.5))) / (prior * q1)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.mean(np.log1p(-b[:, None] * x[None, :]), axis=1)
        lik = n * (np.log(-b / k) - k - 1.0)
    lik = np.where(np.isfinite(lik), lik, -np.inf)
    w = np.exp(lik - logsumexp(lik))
    b_post = float(np.sum(b * w))
    k_hat = float(np.mean(np.log1p(-b_post * x)))
    sigma = -k_hat / b_post
    k_hat = (n * k_hat + 10 * 0.5) / (n + 10)
    return k_hat, sigma


def pareto_k(log_ratios: np.ndarray) -> float:
    """Tail shape of importance ratios exp(log_ratios) (larger is heavier)."""
    lr = np.sort(np.asarray(log_ratios, dtype=float))
    S = lr.size
    M = int(min(0.2 * S, 3.0 * math.sqrt(S)))
    if M < 5:
        return math.nan
    tail = lr[-M:]
    cut = lr[-M - 1]
    # work on the ratio scale relative to the largest to avoid overflow
    shift = lr[-1]
    exc = np.exp(tail - shift) - np.exp(cut - shift)
    if not np.any(exc > 0):
        return 0.0
    exc = exc[exc > 0]
    k, _ = gpd_fit(exc)
    return float(k)


@dataclass(frozen=True)
class CpoResult:
    neg_lpml: float
    log_cpo: np.ndarray
    k_hat: np.ndarray
    flags: np.ndarray
    threshold: float

    @property
    def cpo(self) -> np.ndarray:
        return np.exp(self.log_cpo)

    @property
    def n_flagged(self) -> int:
        return int(np.sum(self.flags))


def cpo_lpml(ll, threshold: float = PARETO_K_THRESHOLD) -> CpoResult:
    """Harmonic-mean CPO estimates with a Pareto tail reliability flag.

    log cpo_i = -log mean_s exp(-ll[s, i]). The leave-one-out importance
    ratios are exp(-ll[s, i]); an entry is flagged when the fitted
    generalised-Pareto shape of their upper tail exceeds ``threshold``
    (estimate variance then unbounded in practice). Flagged entries are
    excluded from -LPML.
    """
    ll = _check(ll)
    S = ll.shape[0]
    log_cpo = -(logsumexp(-ll, axis=0) - math.log(S))
    k_hat = np.array([pareto_k(-ll[:, i]) for i in range(ll.shape[1])])
    flags = np.nan_to_num(k_hat, nan=0.0) > threshold
    neg = -float(np.sum(log_cpo[~flags]))
    return CpoResult(neg_lpml=neg, log_cpo=log_cpo, k_hat=k_hat, flags=flags, threshold=threshold)


# -- fit to data ---------------------------------------------------------------


def predictive_mse(y, yhat) -> float:
    """Mean squared error over the observed (finite) entries of ``y``."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs yhat {yhat.shape}")
    mask = np.isfinite(y)
    if not mask.any():
        raise ValueError("no observed entries")
    r = y[mask] - yhat[mask]
    return float(np.mean(r * r))


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = (q75 - q25) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


@dataclass(frozen=True)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(trapezoid(self.density, self.grid))


def residual_kde(residuals, size: int = 512, span: float = 6.0) -> KdeCurve:
    """Gaussian-kernel density of residuals with Silverman's bandwidth.

    The grid runs from min - span h to max + span h.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    r = r[np.isfinite(r)]
    if r.size < 2:
        raise ValueError("need at least two residuals")
    if np.ptp(r) == 0:
        raise ValueError("residuals have zero variance")
    h = silverman_bandwidth(r)
    grid = np.linspace(r.min() - span * h, r.max() + span * h, size)
    u = (grid[:, None] - r[None, :]) / h
    dens = np.exp(-0.5 * u * u).sum(axis=1) / (r.size * h * math.sqrt(2.0 * math.pi))
    return KdeCurve(grid=grid, density=dens, bandwidth=h)


# -- bundle --------------------------------------------------------------------


@dataclass(frozen=True)
class CriteriaBundle:
    neg_lpml: float
    waic: float
    lppd: float
    p_waic: float
    dic: float
    expected_deviance: float
    p_d: float
    mse: float
    log_cpo: np.ndarray = field(repr=False)
    cpo_flags: np.ndarray = field(repr=False)
    k_hat: np.ndarray = field(repr=False)
    draws: int = 0

    @property
    def n_flagged(self) -> int:
        return int(np.sum(self.cpo_flags))

    def to_dict(self, pointwise: bool = False) -> dict:
        out = {
            "neg_lpml": self.neg_lpml,
            "waic": self.waic,
            "lppd": self.lppd,
            "p_waic": self.p_waic,
            "dic": self.dic,
            "expected_deviance": self.expected_deviance,
            "p_d": self.p_d,
            "mse": self.mse,
            "cpo_flagged": self.n_flagged,
            "draws": self.draws,
        }
        if pointwise:
            out["log_cpo"] = self.log_cpo.tolist()
            out["cpo_flags"] = self.cpo_flags.astype(int).tolist()
        return out


def compute_bundle(ll, ll_at_mean, y, yhat) -> CriteriaBundle:
    w = waic(ll)
    d = dic(ll, ll_at_mean)
    c = cpo_lpml(ll)
    return CriteriaBundle(
        neg_lpml=c.neg_lpml,
        waic=w.waic,
        lppd=w.lppd,
        p_waic=w.p_waic,
        dic=d.dic,
        expected_deviance=d.expected_deviance,
        p_d=d.p_d,
        mse=predictive_mse(y, yhat),
        log_cpo=c.log_cpo,
        cpo_flags=c.flags,
        k_hat=c.k_hat,
        draws=int(np.asarray(ll).shape[0]),
    )
