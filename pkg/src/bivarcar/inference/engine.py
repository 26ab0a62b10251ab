"""Nested approximation: hyperparameter mode, grid exploration, mixture marginals."""
from __future__ import annotations

import itertools
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import ndtr, ndtri

from ..criteria import CriteriaBundle, compute_bundle
from .model import CompiledModel, Dataset, HyperPoint, LatentApprox, ModelSpec

LOG_WEIGHT_DROP = 6.0
GRID_STEPS = (-2.0, -1.0, 0.0, 1.0, 2.0)
QUANTILES = (0.05, 0.5, 0.95)


@dataclass
class GridPoint:
    z: np.ndarray  # whitened offset from the mode
    free: np.ndarray  # internal free coordinates
    hyper: HyperPoint
    log_post: float
    approx: LatentApprox
    weight: float = 0.0


@dataclass
class Convergence:
    optimizer_success: bool
    optimizer_message: str
    optimizer_evaluations: int
    fallback: bool
    hessian_adjusted: bool
    laplace_unconverged: int
    max_grad_norm: float
    flags: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flags

    def to_dict(self) -> dict:
        return {
            "optimizer_success": self.optimizer_success,
            "optimizer_message": self.optimizer_message,
            "optimizer_evaluations": self.optimizer_evaluations,
            "fallback": self.fallback,
            "hessian_adjusted": self.hessian_adjusted,
            "laplace_unconverged": self.laplace_unconverged,
            "max_grad_norm": self.max_grad_norm,
            "flags": list(self.flags),
        }


@dataclass
class Summary:
    mean: float
    sd: float
    q05: float
    q50: float
    q95: float

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "q05": self.q05, "q50": self.q50, "q95": self.q95}


@dataclass
class PosteriorFit:
    """Posterior summaries of one model on one dataset.

    ``latent`` rows follow :meth:`CompiledModel.latent_labels`; ``hyper`` is
    keyed by natural-scale hyperparameter names.
    """

    spec: ModelSpec
    model: CompiledModel
    method: str
    latent_labels: list
    latent_mean: np.ndarray
    latent_sd: np.ndarray
    latent_q: np.ndarray  # d x 3 (5%, 50%, 95%)
    hyper: dict
    yhat: np.ndarray
    criteria: CriteriaBundle
    grid: list
    convergence: Convergence
    timings: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def fixed(self) -> slice:
        return self.model.fixed_effect_slice()

    @property
    def beta_slice(self) -> slice:
        return slice(self.model.off_beta, self.model.off_z)

    def beta_mean(self) -> np.ndarray:
        """k x p posterior means of the covariate effects."""
        return self.latent_mean[self.beta_slice].reshape(self.model.k, self.model.p)

    def z_mean(self) -> np.ndarray:
        """n x k posterior means of the latent field."""
        if not self.model.has_z:
            return np.zeros((self.model.n, self.model.k))
        return self.latent_mean[self.model.z_slice()].reshape(self.model.k, self.model.n).T

    def constraint_residual(self) -> float:
        if not self.model.m:
            return 0.0
        return float(np.max(np.abs(self.model.A @ self.latent_mean)))

    def latent_summary(self, i: int) -> Summary:
        q = self.latent_q[i]
        return Summary(float(self.latent_mean[i]), float(self.latent_sd[i]), *map(float, q))


# -- hyperparameter exploration -----------------------------------------------


class _Objective:
    """Negative log pi(psi | y) with warm-started latent modes."""

    def __init__(self, model: CompiledModel):
        self.model = model
        self.theta = None
        self.evals = 0
        self.cache: dict = {}

    def __call__(self, x: np.ndarray) -> float:
        key = tuple(np.round(np.asarray(x, dtype=float), 14))
        if key in self.cache:
            return self.cache[key]
        self.evals += 1
        val, la, _ = self.model.log_post_hyper(np.asarray(x, dtype=float), self.theta)
        if la is not None and math.isfinite(val) and self.theta is None:
            self.theta = la.mode
        out = -val if math.isfinite(val) else 1e300
        self.cache[key] = out
        return out

    def grad(self, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
        g = np.empty(x.size)
        for i in range(x.size):
            e = np.zeros(x.size)
            e[i] = h
            fp, fm = self(x + e), self(x - e)
            if fp >= 1e299 or fm >= 1e299:
                f0 = self(x)
                g[i] = (fp - f0) / h if fp < 1e299 else (f0 - fm) / h
            else:
                g[i] = (fp - fm) / (2.0 * h)
        return g


def _bounds(model: CompiledModel, x0: np.ndarray) -> list:
    out = []
    for nm, v in zip(model.free_names, x0):
        if nm.startswith("log_"):
            out.append((v - 12.0, v + 12.0))
        elif nm == "atanh_rho":
            out.append((-4.0, 4.0))
        elif nm.startswith("alpha_u_"):
            out.append((-4.0, 4.0))
        else:  # logit_phi
            out.append((-8.0, 16.0))
    return out


def _coarse_grid(obj: _Objective, x0: np.ndarray, bounds: list) -> np.ndarray:
    """Best point of a 3-level grid over a box around the start."""
    axes = []
    for (lo, hi), v in zip(bounds, x0):
        width = min(3.0, 0.5 * (hi - lo))
        axes.append([max(lo, v - width), v, min(hi, v + width)])
    best, best_val = x0, obj(x0)
    for pt in itertools.product(*axes):
        p = np.array(pt)
        val = obj(p)
        if val < best_val:
            best, best_val = p, val
    return best


def find_mode(model: CompiledModel, x0: np.ndarray | None = None, maxiter: int = 200):
    """Quasi-Newton maximisation of log pi(psi | y) over the free coordinates."""
    obj = _Objective(model)
    if x0 is None:
        x0 = model.start_point()
    bounds = _bounds(model, x0)
    f0 = obj(x0)
    fallback = False
    msg = ""
    success = False
    if len(x0) == 0:
        return x0, obj, True, "no free hyperparameters", False
    if f0 >= 1e299:
        fallback = True
        x0 = _coarse_grid(obj, x0, bounds)
        f0 = obj(x0)
    try:
        res = optimize.minimize(
            obj,
            x0,
            jac=obj.grad,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": maxiter, "ftol": 1e-12, "gtol": 1e-6},
        )
        x, fx, success, msg = res.x, float(res.fun), bool(res.success), str(res.message)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        x, fx, success, msg = x0, f0, False, f"optimizer error: {exc}"
    if not math.isfinite(fx) or fx >= 1e299 or fx > f0:
        fallback = True
        x = _coarse_grid(obj, x0, bounds)
        msg += "; coarse-grid fallback"
    return np.asarray(x, dtype=float), obj, success, msg, fallback


def hessian(obj: _Objective, x: np.ndarray, h: float = 2e-3) -> np.ndarray:
    """Central finite-difference Hessian of the negative log posterior."""
    d = x.size
    H = np.empty((d, d))
    f0 = obj(x)
    E = np.eye(d) * h
    for i in range(d):
        H[i, i] = (obj(x + E[i]) - 2.0 * f0 + obj(x - E[i])) / (h * h)
        for j in range(i):
            v = (
                obj(x + E[i] + E[j])
                - obj(x + E[i] - E[j])
                - obj(x - E[i] + E[j])
                + obj(x - E[i] - E[j])
            ) / (4.0 * h * h)
            H[i, j] = H[j, i] = v
    return H


def _whitening(H: np.ndarray) -> tuple[np.ndarray, bool]:
    """Matrix T with T' H T = I (eigenvalues floored when H is not SPD)."""
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    floor = 1e-6 * max(float(np.max(np.abs(lam))), 1.0)
    adjusted = bool(np.any(lam < floor))
    lam = np.maximum(lam, floor)
    return V / np.sqrt(lam), adjusted


# -- mixtures ------------------------------------------------------------------


def mixture_quantiles(w: np.ndarray, mu: np.ndarray, sd: np.ndarray, probs=QUANTILES) -> np.ndarray:
    """Quantiles of sum_k w_k N(mu_k, sd_k^2) by bisection-safe root finding."""
    if w.size == 1:
        return mu[0] + sd[0] * ndtri(np.asarray(probs))
    out = []
    lo0 = float(np.min(mu - 10.0 * sd))
    hi0 = float(np.max(mu + 10.0 * sd))
    for p in probs:
        f = lambda x, p=p: float(np.sum(w * ndtr((x - mu) / sd))) - p
        out.append(optimize.brentq(f, lo0, hi0, xtol=1e-12, rtol=1e-12))
    return np.array(out)


def _split_normal_draws(rng, sig_minus, sig_plus, size):
    """Independent split-normal draws (mode 0) in whitened coordinates."""
    d = sig_minus.size
    u = rng.standard_normal((size, d))
    # choose the side with probability proportional to its scale
    side = rng.random((size, d)) < sig_plus / (sig_plus + sig_minus)
    return np.where(side, np.abs(u) * sig_plus, -np.abs(u) * sig_minus)


# -- the fit -------------------------------------------------------------------


def fit(
    spec: ModelSpec,
    data: Dataset,
    seed: int = 0,
    draws: int = 4000,
    workers: int = 1,
    grid: bool = True,
    hyper_draws: int = 20000,
    x0: np.ndarray | None = None,
) -> PosteriorFit:
    """Fit ``spec`` to ``data`` with the nested Laplace approximation."""
    t_start = time.perf_counter()
    model = CompiledModel(spec, data)
    rng = np.random.default_rng(seed)

    xm, obj, success, msg, fallback = find_mode(model, x0)
    t_mode = time.perf_counter()
    d = xm.size
    flags = []
    if fallback:
        flags.append("optimizer fallback to coarse grid")

    if d:
        H = hessian(obj, xm)
        T, adjusted = _whitening(H)
    else:
        T, adjusted = np.zeros((0, 0)), False
    if adjusted:
        flags.append("hyperparameter Hessian not positive definite at the mode")

    # axis-aligned design in whitened coordinates
    zs = [np.zeros(d)]
    if grid:
        for i in range(d):
            for s in GRID_STEPS:
                if s != 0.0:
                    z = np.zeros(d)
                    z[i] = s
                    zs.append(z)

    theta0 = obj.theta
    center_val, center_la, _ = model.log_post_hyper(xm, theta0)
    if center_la is not None:
        theta0 = center_la.mode

    def evaluate(z):
        x = xm + T @ z
        val, la, hp = model.log_post_hyper(x, theta0)
        return x, val, la, hp

    if workers > 1 and len(zs) > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(evaluate, zs))
    else:
        results = [evaluate(z) for z in zs]

    pts = [
        GridPoint(z=z, free=x, hyper=hp, log_post=val, approx=la)
        for z, (x, val, la, hp) in zip(zs, results)
    ]
    if not math.isfinite(pts[0].log_post):
        raise FloatingPointError("log posterior is not finite at the hyperparameter mode")

    # split-normal scales per whitened axis, read off the log-density drop at
    # the +/-2 points (the +/-1 points when the outer ones are unusable)
    sig_m, sig_p = np.ones(d), np.ones(d)
    for reach in (1.0, 2.0):
        for p in pts[1:]:
            i = int(np.flatnonzero(p.z)[0])
            s = p.z[i]
            if abs(s) != reach:
                continue
            drop = pts[0].log_post - p.log_post
            if not (math.isfinite(drop) and drop > 1e-8):
                continue
            scale = min(max(reach / math.sqrt(2.0 * drop), 0.2), 5.0)
            if s > 0:
                sig_p[i] = scale
            else:
                sig_m[i] = scale

    # weights, pruned at a log-density drop > LOG_WEIGHT_DROP from the best point
    lp = np.array([p.log_post for p in pts])
    top = float(np.max(lp))
    keep = [p for p in pts if math.isfinite(p.log_post) and p.log_post >= top - LOG_WEIGHT_DROP]
    lw = np.array([p.log_post for p in keep]) - top
    w = np.exp(lw)
    w /= w.sum()
    for p, wi in zip(keep, w):
        p.weight = float(wi)

    n_unconv = sum(1 for p in keep if not p.approx.converged)
    max_g = max(p.approx.grad_norm for p in keep)
    if n_unconv:
        flags.append(f"latent Newton iterations unconverged at {n_unconv} grid point(s)")

    # latent marginals: Gaussian mixtures over the retained grid
    mus = np.array([p.approx.mode for p in keep])
    sds = np.array([p.approx.sd() for p in keep])
    mean = w @ mus
    second = w @ (sds**2 + mus**2)
    var = np.maximum(second - mean**2, 0.0)
    sd = np.sqrt(var)
    q = np.empty((model.d, 3))
    for i in range(model.d):
        if sd[i] == 0.0:
            q[i] = mean[i]
        else:
            q[i] = mixture_quantiles(w, mus[:, i], np.maximum(sds[:, i], 1e-300))
    if model.m:
        # constraints are linear, so the mixture mean satisfies them too;
        # remove accumulated rounding
        mean = model.project(mean) if np.max(np.abs(model.A @ mean)) > 0 else mean
    t_grid = time.perf_counter()

    # hyperparameter marginals from split-normal draws on the whitened axes
    hyper = _hyper_summaries(model, xm, T, sig_m, sig_p, rng, hyper_draws)

    # posterior draws for the criteria
    idx = rng.choice(len(keep), size=draws, p=w) if len(keep) > 1 else np.zeros(draws, dtype=int)
    counts = np.bincount(idx, minlength=len(keep))
    thetas, nats = [], []
    for p, c in zip(keep, counts):
        if c:
            thetas.append(p.approx.sample(rng, int(c)))
            nats.extend([p.hyper.natural] * int(c))
    thetas = np.vstack(thetas)
    ll = model.pointwise_loglik_many(thetas, nats)
    ll_bar = model.pointwise_loglik(mean, pts[0].hyper.natural)
    yhat = model.linear_predictor(mean)
    crit = compute_bundle(ll, ll_bar, data.Y, yhat)
    t_end = time.perf_counter()

    conv = Convergence(
        optimizer_success=success,
        optimizer_message=msg,
        optimizer_evaluations=obj.evals,
        fallback=fallback,
        hessian_adjusted=adjusted,
        laplace_unconverged=n_unconv,
        max_grad_norm=float(max_g),
        flags=flags,
    )
    for f in flags:
        warnings.warn(f)
    return PosteriorFit(
        spec=spec,
        model=model,
        method="laplace",
        latent_labels=model.latent_labels(),
        latent_mean=mean,
        latent_sd=sd,
        latent_q=q,
        hyper=hyper,
        yhat=yhat,
        criteria=crit,
        grid=keep,
        convergence=conv,
        timings={
            "mode": t_mode - t_start,
            "grid": t_grid - t_mode,
            "criteria": t_end - t_grid,
            "total": t_end - t_start,
        },
        extra={
            "mode_internal": dict(zip(model.free_names, map(float, xm))),
            # Gaussian covariance of the free internal coordinates, H^-1 = T T'
            "mode_cov": T @ T.T,
            "hessian_scales": (sig_m, sig_p),
        },
    )


def _hyper_summaries(model, xm, T, sig_m, sig_p, rng, size) -> dict:
    d = xm.size
    if d:
        Z = _split_normal_draws(rng, sig_m, sig_p, size)
        X = xm[None, :] + Z @ T.T
    else:
        X = np.zeros((size, 0))
    rows = [model.to_natural(model.full_internal(x)) for x in X]
    names = list(rows[0].keys())
    out = {}
    for nm in names:
        v = np.array([r[nm] for r in rows])
        qs = np.quantile(v, QUANTILES)
        out[nm] = Summary(float(v.mean()), float(v.std(ddof=1)), *map(float, qs))
    return out
