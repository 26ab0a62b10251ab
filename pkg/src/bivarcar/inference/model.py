"""Model specification, design assembly and the latent Gaussian approximation.

The latent vector is laid out as

    theta = (intercepts, beta, z)

with each block outcome-major: intercepts of outcome 1 then outcome 2, and
so on. ``z`` is absent for the null family.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

from ..deconfound import RemovalPattern, deconfounded_design
from ..graph import AreaGraph, eigendecompose
from ..likelihood import (
    LOG_2PI,
    gamma1_of_alpha,
    log_gamma_prior_on_precision,
    pc_prior,
    sn_derivs,
    sn_standardize,
)
from ..multilevel import LevelMap, aggregate
from ..spatial_prior import (
    FAMILIES,
    build_constraints,
    covariance_from_params,
    log_prior_flat_sd,
    log_prior_lambda_internal,
    null_basis,
    pcar_logdet_table,
    scale_structure,
    wishart_logpdf,
)

LIKELIHOODS = ("gaussian", "skew_normal")
CONFOUNDING = ("base", "rsr", "spatial_plus")


class ModelError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


# -- data ----------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    graph: AreaGraph
    lmap: LevelMap
    X: np.ndarray
    Y: np.ndarray
    covariate_names: tuple[str, ...]
    outcome_names: tuple[str, ...] = ("y_math", "y_ital")
    obs_ids: tuple | None = None

    def __post_init__(self):
        if self.lmap.n != self.graph.n:
            raise ModelError(f"level map has {self.lmap.n} macro-areas, graph has {self.graph.n}")
        # the level map's component partition must match the graph's
        comp = np.argmax(self.lmap.C, axis=1)
        pairs = set(zip(comp.tolist(), self.graph.components.tolist()))
        if len(pairs) != self.graph.G or len({a for a, _ in pairs}) != self.graph.G:
            raise ModelError("component labels disagree with the graph's connected components")
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", np.asarray(self.X, dtype=float).reshape(self.lmap.N, -1))
        if Y.shape[0] != self.lmap.N:
            raise ModelError("Y and the level map disagree on the number of observations")
        if np.any(~np.isfinite(self.X)):
            raise ModelError("covariates must be finite")

    @property
    def N(self) -> int:
        return self.lmap.N

    @property
    def k(self) -> int:
        return self.Y.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.X, np.nan_to_num(self.Y, nan=-1e300), self.lmap.xi, self.graph.W):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        h.update(repr((self.covariate_names, self.outcome_names)).encode())
        return h.hexdigest()[:16]


# -- model specification -------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    likelihoods: tuple[str, ...] = ("gaussian", "skew_normal")
    family: str = "icar"
    confounding: str = "base"
    pattern: RemovalPattern | None = None
    rescale: bool = True
    scaled: bool | None = None
    intercepts: str | None = None
    constraints: str | None = None
    wishart_df: float | None = None
    pc_lambda: float = 4.0
    beta_var: float = 1e3
    intercept_mean: float = 180.0
    intercept_var: float = 1e3
    gamma_shape: float = 1e-3
    gamma_rate: float = 1e-3
    fixed: Mapping[str, float] = field(default_factory=dict)
    label: str | None = None

    def __post_init__(self):
        for lk in self.likelihoods:
            if lk not in LIKELIHOODS:
                raise ModelError(f"unknown likelihood {lk!r}")
        if self.family not in FAMILIES:
            raise ModelError(f"unknown latent family {self.family!r}")
        if self.confounding not in CONFOUNDING:
            raise ModelError(f"unknown confounding treatment {self.confounding!r}")
        if self.confounding == "spatial_plus" and self.pattern is None:
            raise ModelError("spatial_plus needs a removal pattern")
        if self.confounding == "rsr" and self.family == "null":
            raise ModelError("rsr needs a latent field")
        if self.family == "icar" and self.intercepts == "single":
            raise ModelError("ICAR fields need component-specific intercepts")
        if self.intercepts not in (None, "component", "single"):
            raise ModelError(f"unknown intercept design {self.intercepts!r}")
        if self.constraints not in (None, "none", "sum_to_zero", "rsr"):
            raise ModelError(f"unknown constraint kind {self.constraints!r}")
        object.__setattr__(self, "likelihoods", tuple(self.likelihoods))
        object.__setattr__(self, "fixed", dict(self.fixed))

    @property
    def k(self) -> int:
        return len(self.likelihoods)

    @property
    def intercept_design(self) -> str:
        if self.intercepts:
            return self.intercepts
        return "single" if self.family == "pcar" else "component"

    @property
    def constraint_kind(self) -> str:
        if self.constraints:
            return self.constraints
        if self.confounding == "rsr":
            return "rsr"
        return "sum_to_zero" if self.family in ("icar", "indep_icar") else "none"

    @property
    def is_scaled(self) -> bool:
        if self.scaled is not None:
            return self.scaled
        return self.family in ("icar", "indep_icar")

    @property
    def df(self) -> float:
        if self.wishart_df is not None:
            return float(self.wishart_df)
        return float(self.k if self.family == "pcar" else 2 * self.k + 1)

    def describe(self) -> str:
        if self.label:
            return self.label
        parts = [self.family]
        if self.confounding != "base":
            parts.append(self.confounding)
        return "-".join(parts)

    def to_dict(self) -> dict:
        out = {
            "likelihoods": list(self.likelihoods),
            "family": self.family,
            "confounding": self.confounding,
            "rescale": self.rescale,
            "scaled": self.is_scaled,
            "intercepts": self.intercept_design,
            "constraints": self.constraint_kind,
            "wishart_df": self.df if self.family in ("icar", "pcar") else None,
            "pc_lambda": self.pc_lambda,
            "beta_var": self.beta_var,
            "intercept_mean": self.intercept_mean,
            "intercept_var": self.intercept_var,
            "gamma_shape": self.gamma_shape,
            "gamma_rate": self.gamma_rate,
            "fixed": {k: float(v) for k, v in sorted(self.fixed.items())},
            "label": self.describe(),
        }
        if self.pattern is not None:
            out["pattern"] = {k: list(v) for k, v in sorted(self.pattern.counts.items())}
            if self.pattern.explicit:
                out["pattern_explicit"] = {
                    f"{k[0]}@{k[1]}": list(v) for k, v in sorted(self.pattern.explicit.items())
                }
        return out


# -- hyperparameters -----------------------------------------------------------


@dataclass(frozen=True)
class HyperPoint:
    internal: np.ndarray
    names: tuple[str, ...]
    natural: Mapping[str, float]
    log_prior: float

    def __getitem__(self, key: str) -> float:
        return self.natural[key]


@dataclass
class LatentApprox:
    """Constrained Gaussian approximation of theta | psi, y."""

    mode: np.ndarray
    Q: np.ndarray
    chol: tuple
    A: np.ndarray
    QiAt: np.ndarray | None
    SA_chol: tuple | None
    log_marginal: float
    loglik: float
    iterations: int
    grad_norm: float
    converged: bool
    logdet_post: float = 0.0
    _cov: np.ndarray | None = None

    def cov(self) -> np.ndarray:
        if self._cov is None:
            S = linalg.cho_solve(self.chol, np.eye(self.Q.shape[0]))
            if self.QiAt is not None:
                S -= self.QiAt @ linalg.cho_solve(self.SA_chol, self.QiAt.T)
            self._cov = 0.5 * (S + S.T)
        return self._cov

    def sd(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov()), 0.0))

    def logpdf(self, theta: np.ndarray) -> float:
        """Log-density on the constraint subspace, without the 2 pi term."""
        dv = theta - self.mode
        return 0.5 * self.logdet_post - 0.5 * float(dv @ self.Q @ dv)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draws from the constrained Gaussian (conditioning by kriging)."""
        L = self.chol[0]
        lower = self.chol[1]
        eps = rng.standard_normal((self.Q.shape[0], size))
        # Q = L L' (lower) or U'U (upper); solve L' x = eps
        if lower:
            x = linalg.solve_triangular(L, eps, lower=True, trans="T")
        else:
            x = linalg.solve_triangular(L, eps, lower=False)
        if self.QiAt is not None:
            x -= self.QiAt @ linalg.cho_solve(self.SA_chol, self.A @ x)
        return (self.mode[:, None] + x).T


def _softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


class CompiledModel:
    """A ModelSpec bound to a Dataset: designs, priors, constraints, transforms."""

    def __init__(self, spec: ModelSpec, data: Dataset):
        if spec.k != data.k:
            raise ModelError(f"spec has {spec.k} likelihoods, data has {data.k} outcomes")
        self.spec = spec
        self.data = data
        g, lmap = data.graph, data.lmap
        self.k, self.n, self.N = spec.k, g.n, data.N
        self.has_z = spec.family != "null"

        # covariate design (deconfounded for Spatial+)
        if spec.confounding == "spatial_plus":
            cov = aggregate(data.X, lmap, data.covariate_names)
            self.eig = eigendecompose(g)
            self.Xd = deconfounded_design(cov, lmap, self.eig, spec.pattern, spec.rescale)
        else:
            self.Xd = data.X.copy()
        self.p = self.Xd.shape[1]

        if spec.intercept_design == "component":
            self.Xint = lmap.xi @ lmap.C
            self.int_labels = [f"component {c}" for c in lmap.component_labels]
        else:
            self.Xint = np.ones((self.N, 1))
            self.int_labels = ["intercept"]
        self.gi = self.Xint.shape[1]

        k, gi, p, n = self.k, self.gi, self.p, self.n
        self.off_beta = k * gi
        self.off_z = k * gi + k * p
        self.d = self.off_z + (k * n if self.has_z else 0)
        self.idx = []
        for j in range(k):
            ix = list(range(j * gi, (j + 1) * gi)) + list(
                range(self.off_beta + j * p, self.off_beta + (j + 1) * p)
            )
            if self.has_z:
                ix += list(range(self.off_z + j * n, self.off_z + (j + 1) * n))
            self.idx.append(np.array(ix))
        blocks = [self.Xint, self.Xd] + ([lmap.xi] if self.has_z else [])
        self.M_all = np.hstack(blocks)  # N x d_j, shared by outcomes
        self.obs = [np.flatnonzero(np.isfinite(data.Y[:, j])) for j in range(k)]
        self.M = [self.M_all[rows] for rows in self.obs]
        self.y = [data.Y[rows, j] for j, rows in enumerate(self.obs)]
        self.n_obs = sum(r.size for r in self.obs)

        # fixed-effect priors
        self.mu0 = np.zeros(self.d)
        self.mu0[: self.off_beta] = spec.intercept_mean
        self.fixed_prec = np.concatenate(
            [np.full(self.off_beta, 1.0 / spec.intercept_var), np.full(k * p, 1.0 / spec.beta_var)]
        )

        # latent structure and constraints
        self.structure = None
        if spec.family in ("icar", "indep_icar"):
            self.structure = scale_structure(g).R if spec.is_scaled else g.R
        elif spec.family == "iid":
            self.structure = np.eye(n)
        if spec.family == "pcar":
            self._pcar_table = pcar_logdet_table(g)
        kind = spec.constraint_kind
        if not self.has_z:
            kind = "none"
        self.constraint_kind = kind
        if self.has_z:
            X_tot = np.hstack([self.Xint, self.Xd])
            self.cons = build_constraints(kind, g, lmap, X_tot, k)
            Az = self.cons.A
        else:
            self.cons = None
            Az = np.zeros((0, 0))
        self.m = Az.shape[0]
        self.A = np.zeros((self.m, self.d))
        if self.m:
            self.A[:, self.off_z :] = Az
            self.Az = Az
            AAt = Az @ Az.T
            self._AAt_chol = linalg.cho_factor(AAt)
            self._logdet_AAt = 2.0 * float(np.sum(np.log(np.diag(self._AAt_chol[0]))))
        self._z_fast = None
        if self.has_z:
            self._setup_prior_logdet(g)

        self._setup_hyper()

    # -- prior log-determinant of the constrained z block -----------------------

    def _setup_prior_logdet(self, g: AreaGraph):
        fam, kind = self.spec.family, self.constraint_kind
        if fam in ("icar", "indep_icar") and kind == "sum_to_zero":
            lam = np.linalg.eigvalsh(self.structure)
            lam = np.sort(lam)[g.G :]
            self._z_fast = ("pdet", g.n - g.G, float(np.sum(np.log(lam))))
        elif fam == "iid" and kind == "none":
            self._z_fast = ("full", g.n, 0.0)
        elif fam == "pcar" and kind == "none":
            self._z_fast = ("pcar", g.n, None)
        else:
            self.Bz = null_basis(self.Az, self.k * self.n) if self.m else np.eye(self.k * self.n)

    def z_logdet(self, Lam: np.ndarray, phi: float | None) -> float:
        """log |Bz' (Lambda kron S) Bz|, Bz an orthonormal basis of the constraint null space."""
        _, logdet_L = np.linalg.slogdet(Lam)
        if self._z_fast is not None:
            tag, r, extra = self._z_fast
            if tag == "pcar":
                sum_logd, nu = self._pcar_table
                extra = sum_logd + float(np.sum(np.log1p(-phi * nu)))
            return r * logdet_L + self.k * extra
        Qz = np.kron(Lam, self.structure_at(phi))
        H = self.Bz.T @ Qz @ self.Bz
        try:
            c = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            return -math.inf
        return 2.0 * float(np.sum(np.log(np.diag(c))))

    def structure_at(self, phi: float | None) -> np.ndarray:
        if self.spec.family == "pcar":
            g = self.data.graph
            return g.D - phi * g.W
        return self.structure

    # -- hyperparameters --------------------------------------------------------

    def _setup_hyper(self):
        spec, k = self.spec, self.k
        names = []
        if spec.family in ("icar", "pcar"):
            names += [f"log_sigma2_{j + 1}" for j in range(k)]
            if k == 2:
                names.append("atanh_rho")
        elif spec.family in ("iid", "indep_icar"):
            names += [f"log_sigma2_{j + 1}" for j in range(k)]
        names += [f"log_omega_{j + 1}" for j in range(k)]
        self.sn_outcomes = [j for j, lk in enumerate(spec.likelihoods) if lk == "skew_normal"]
        names += [f"alpha_u_{j + 1}" for j in self.sn_outcomes]
        if spec.family == "pcar":
            names.append("logit_phi")
        self.hyper_names = tuple(names)
        self.pc = pc_prior(float(spec.pc_lambda)) if self.sn_outcomes else None

        fixed_internal = {}
        for key, val in spec.fixed.items():
            name, value = self.natural_to_internal(key, float(val))
            if name not in names:
                raise ModelError(f"fixed hyperparameter {key!r} is not part of this model")
            fixed_internal[name] = value
        self.fixed_internal = fixed_internal
        self.free = [i for i, nm in enumerate(names) if nm not in fixed_internal]
        self.free_names = tuple(names[i] for i in self.free)

    def natural_to_internal(self, key: str, val: float) -> tuple[str, float]:
        if key.startswith("sigma2_"):
            return "log_sigma2_" + key[7:], math.log(val)
        if key == "rho":
            return "atanh_rho", math.atanh(val)
        if key.startswith("omega_"):
            return "log_omega_" + key[6:], math.log(val)
        if key.startswith("alpha_"):
            t = float(np.sign(val)) * float(self.pc.distance(val)) if self.pc else 0.0
            return "alpha_u_" + key[6:], math.atanh(t / self.pc.d_max)
        if key == "phi":
            return "logit_phi", float(logit(val))
        if key in self.hyper_names if hasattr(self, "hyper_names") else False:
            return key, val
        raise ModelError(f"unknown hyperparameter {key!r}")

    def full_internal(self, free: np.ndarray) -> np.ndarray:
        out = np.empty(len(self.hyper_names))
        for nm, v in self.fixed_internal.items():
            out[self.hyper_names.index(nm)] = v
        out[self.free] = free
        return out

    def hyper_point(self, free: np.ndarray) -> HyperPoint:
        free = np.asarray(free, dtype=float)
        full = self.full_internal(free)
        nat = self.to_natural(full)
        return HyperPoint(full, self.hyper_names, nat, self.log_prior_hyper(full))

    def to_natural(self, full: np.ndarray) -> dict:
        v = dict(zip(self.hyper_names, (float(x) for x in full)))
        nat = {}
        for nm, x in v.items():
            if nm.startswith("log_sigma2_"):
                nat["sigma2_" + nm[11:]] = math.exp(x)
            elif nm == "atanh_rho":
                nat["rho"] = math.tanh(x)
            elif nm.startswith("log_omega_"):
                nat["omega_" + nm[10:]] = math.exp(x)
            elif nm.startswith("alpha_u_"):
                j = nm[8:]
                a = float(self.pc.alpha_of_distance(self.pc.d_max * math.tanh(x)))
                nat["alpha_" + j] = a
                nat["gamma1_" + j] = gamma1_of_alpha(a)
            elif nm == "logit_phi":
                nat["phi"] = float(expit(x))
        return nat

    def log_prior_hyper(self, full: np.ndarray) -> float:
        spec, k = self.spec, self.k
        v = dict(zip(self.hyper_names, (float(x) for x in full)))
        fixed = self.fixed_internal
        lp = 0.0
        if spec.family in ("icar", "pcar"):
            lv = [v[f"log_sigma2_{j + 1}"] for j in range(k)]
            if not any(f"log_sigma2_{j + 1}" in fixed for j in range(k)) and "atanh_rho" not in fixed:
                if k == 2:
                    lp += log_prior_lambda_internal([lv[0], lv[1], v["atanh_rho"]], spec.df)
                else:
                    lam = np.array([[math.exp(-lv[0])]])
                    lp += wishart_logpdf(lam, spec.df) - lv[0]
        elif spec.family in ("iid", "indep_icar"):
            for j in range(k):
                nm = f"log_sigma2_{j + 1}"
                if nm not in fixed:
                    lp += log_prior_flat_sd(v[nm])
        for j in range(k):
            nm = f"log_omega_{j + 1}"
            if nm not in fixed:
                lp += float(log_gamma_prior_on_precision(v[nm], spec.gamma_shape, spec.gamma_rate))
        for j in self.sn_outcomes:
            nm = f"alpha_u_{j + 1}"
            if nm not in fixed:
                u = v[nm]
                th = math.tanh(u)
                lp += self.pc.logdensity_distance(self.pc.d_max * th)
                lp += math.log(self.pc.d_max) + math.log1p(-th * th) if abs(th) < 1 else -math.inf
        if spec.family == "pcar" and "logit_phi" not in fixed:
            x = v["logit_phi"]
            lp += -_softplus(-x) - _softplus(x)
        return lp

    def lambda_at(self, nat: Mapping[str, float]) -> np.ndarray:
        k = self.k
        if self.spec.family in ("icar", "pcar"):
            lv = np.log([nat[f"sigma2_{j + 1}"] for j in range(k)])
            rho = nat.get("rho", 0.0)
            return np.linalg.inv(covariance_from_params(lv, math.atanh(rho) if k == 2 else None))
        return np.diag([1.0 / nat[f"sigma2_{j + 1}"] for j in range(k)])

    def start_point(self) -> np.ndarray:
        """Deterministic starting hyperparameters (internal, free coordinates).

        omega_j: residual variance of a least-squares fit of outcome j on the
        intercept design and covariates. sigma2_j: variance of the
        macro-area means of those residuals (floored at omega_j / 100).
        rho = 0, alpha = 0, phi = 0.9.
        """
        vals = {}
        D = np.hstack([self.Xint, self.Xd])
        for j in range(self.k):
            rows = self.obs[j]
            y = self.y[j]
            coef, *_ = np.linalg.lstsq(D[rows], y, rcond=None)
            res = y - D[rows] @ coef
            om = max(float(np.var(res)), 1e-6)
            vals[f"log_omega_{j + 1}"] = math.log(om)
            if self.has_z:
                xi = self.data.lmap.xi[rows]
                cnt = xi.sum(axis=0)
                act = cnt > 0
                means = (xi.T @ res)[act] / cnt[act]
                s2 = max(float(np.var(means)), om / 100.0)
                vals[f"log_sigma2_{j + 1}"] = math.log(s2)
        vals["atanh_rho"] = 0.0
        for j in self.sn_outcomes:
            vals[f"alpha_u_{j + 1}"] = 0.0
        vals["logit_phi"] = float(logit(0.9))
        return np.array([vals[nm] for nm in self.free_names])

    # -- likelihood -------------------------------------------------------------

    def _lik_params(self, nat: Mapping[str, float], j: int) -> tuple:
        om = nat[f"omega_{j + 1}"]
        if self.spec.likelihoods[j] == "skew_normal":
            a = nat[f"alpha_{j + 1}"]
            m, s = sn_standardize(om, a)
            return ("sn", m, s, a)
        return ("gauss", om)

    def loglik_terms(self, eta: np.ndarray, y: np.ndarray, par: tuple, derivs: bool = True):
        r = y - eta
        if par[0] == "gauss":
            om = par[1]
            ll = -0.5 * (LOG_2PI + math.log(om)) - 0.5 * r * r / om
            if not derivs:
                return ll
            return ll, r / om, np.full_like(r, 1.0 / om)
        _, m, s, a = par
        ll, d1, d2 = sn_derivs(r, m, s, a)
        if not derivs:
            return ll
        return ll, -d1, -d2

    def pointwise_loglik(self, theta: np.ndarray, nat: Mapping[str, float]) -> np.ndarray:
        """Log-likelihood of every observed entry, outcome-major."""
        out = []
        for j in range(self.k):
            eta = self.M[j] @ theta[self.idx[j]]
            out.append(self.loglik_terms(eta, self.y[j], self._lik_params(nat, j), derivs=False))
        return np.concatenate(out)

    def pointwise_loglik_many(self, thetas: np.ndarray, nats: Sequence[Mapping[str, float]]) -> np.ndarray:
        """S x n_obs log-likelihood matrix for draws (rows of ``thetas``)."""
        S = thetas.shape[0]
        out = np.empty((S, self.n_obs))
        col = 0
        for j in range(self.k):
            eta = thetas[:, self.idx[j]] @ self.M[j].T
            nj = self.y[j].size
            # group draws by identical hyperparameters to vectorise
            keys = {}
            for s, nat in enumerate(nats):
                keys.setdefault(id(nat), []).append(s)
            for rows in keys.values():
                par = self._lik_params(nats[rows[0]], j)
                out[rows, col : col + nj] = self.loglik_terms(
                    eta[rows], self.y[j][None, :], par, derivs=False
                )
            col += nj
        return out

    def linear_predictor(self, theta: np.ndarray) -> np.ndarray:
        """N x k linear predictor for every row, observed or not."""
        return np.column_stack([self.M_all @ theta[self.idx[j]] for j in range(self.k)])

    # -- priors on theta ----------------------------------------------------------

    def z_precision(self, nat: Mapping[str, float]) -> np.ndarray | None:
        if not self.has_z:
            return None
        return np.kron(self.lambda_at(nat), self.structure_at(nat.get("phi")))

    def prior_precision(self, Qz: np.ndarray | None) -> np.ndarray:
        Q0 = np.zeros((self.d, self.d))
        Q0[np.arange(self.off_z), np.arange(self.off_z)] = self.fixed_prec
        if Qz is not None:
            Q0[self.off_z :, self.off_z :] = Qz
        return Q0

    def log_prior_z(self, z: np.ndarray, nat: Mapping[str, float], Qz: np.ndarray | None = None) -> float:
        """Constrained prior log-density of z, dropping the 2 pi constant."""
        Lam = self.lambda_at(nat)
        if Qz is None:
            Qz = np.kron(Lam, self.structure_at(nat.get("phi")))
        return 0.5 * self.z_logdet(Lam, nat.get("phi")) - 0.5 * float(z @ Qz @ z)

    def objective(self, theta: np.ndarray, nat, Q0: np.ndarray) -> float:
        dv = theta - self.mu0
        return -0.5 * float(dv @ Q0 @ dv) + float(np.sum(self.pointwise_loglik(theta, nat)))

    def gradient(self, theta: np.ndarray, nat, Q0: np.ndarray) -> np.ndarray:
        grad = -Q0 @ (theta - self.mu0)
        for j in range(self.k):
            eta = self.M[j] @ theta[self.idx[j]]
            _, gj, _ = self.loglik_terms(eta, self.y[j], self._lik_params(nat, j))
            grad[self.idx[j]] += self.M[j].T @ gj
        return grad

    def project(self, v: np.ndarray) -> np.ndarray:
        if not self.m:
            return v
        return v - self.A.T @ linalg.cho_solve(self._AAt_chol, self.A @ v)

    # -- Gaussian approximation -------------------------------------------------

    def _curvature(self, theta, nat, Q0):
        Q = Q0.copy()
        b = Q0 @ self.mu0
        ll = 0.0
        for j in range(self.k):
            ix = self.idx[j]
            Mj = self.M[j]
            eta = Mj @ theta[ix]
            lj, gj, wj = self.loglik_terms(eta, self.y[j], self._lik_params(nat, j))
            ll += float(np.sum(lj))
            Q[np.ix_(ix, ix)] += Mj.T @ (wj[:, None] * Mj)
            b[ix] += Mj.T @ (wj * eta + gj)
        return Q, b, ll

    def _factor(self, Q):
        try:
            chol = linalg.cho_factor(Q, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericalError("posterior precision is not positive definite") from exc
        if self.m:
            QiAt = linalg.cho_solve(chol, self.A.T)
            SA = self.A @ QiAt
            SA_chol = linalg.cho_factor(0.5 * (SA + SA.T), lower=True)
            return chol, QiAt, SA_chol
        return chol, None, None

    def _krige(self, x, QiAt, SA_chol):
        if QiAt is None:
            return x
        return x - QiAt @ linalg.cho_solve(SA_chol, self.A @ x)

    def laplace(
        self,
        hp: HyperPoint | Mapping[str, float],
        theta0: np.ndarray | None = None,
        tol: float = 1e-8,
        max_iter: int = 50,
    ) -> LatentApprox:
        """Newton iterations for the constrained mode of theta | psi, y.

        Each step maximises the second-order expansion of the log conditional
        density and then imposes A theta = 0 by conditioning by kriging.
        Step-halving guards non-quadratic likelihoods.
        """
        nat = hp.natural if isinstance(hp, HyperPoint) else hp
        Qz = self.z_precision(nat)
        Q0 = self.prior_precision(Qz)
        theta = self.mu0.copy() if theta0 is None else self._krige_start(theta0)
        f = self.objective(theta, nat, Q0)
        converged, gnorm, it = False, math.inf, 0
        for it in range(1, max_iter + 1):
            Q, b, _ = self._curvature(theta, nat, Q0)
            chol, QiAt, SA_chol = self._factor(Q)
            x = self._krige(linalg.cho_solve(chol, b), QiAt, SA_chol)
            step = x - theta
            t = 1.0
            while True:
                cand = theta + t * step
                fc = self.objective(cand, nat, Q0)
                if fc >= f - 1e-10 * (1.0 + abs(f)) or t < 1e-8:
                    break
                t *= 0.5
            theta, f = cand, fc
            gnorm = float(np.linalg.norm(self.project(self.gradient(theta, nat, Q0))))
            if gnorm < tol:
                converged = True
                break
        Q, _, ll = self._curvature(theta, nat, Q0)
        chol, QiAt, SA_chol = self._factor(Q)
        logdet_post = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
        if self.m:
            logdet_post += 2.0 * float(np.sum(np.log(np.diag(SA_chol[0])))) - self._logdet_AAt
        logdet_prior = float(np.sum(np.log(self.fixed_prec)))
        if self.has_z:
            logdet_prior += self.z_logdet(self.lambda_at(nat), nat.get("phi"))
        dv = theta - self.mu0
        quad = float(dv @ Q0 @ dv)
        log_marginal = 0.5 * logdet_prior - 0.5 * quad + ll - 0.5 * logdet_post
        return LatentApprox(
            mode=theta,
            Q=Q,
            chol=chol,
            A=self.A,
            QiAt=QiAt,
            SA_chol=SA_chol,
            log_marginal=log_marginal,
            loglik=ll,
            iterations=it,
            grad_norm=gnorm,
            converged=converged,
            logdet_post=logdet_post,
        )

    def log_joint(self, theta: np.ndarray, hp: HyperPoint) -> float:
        """log pi(psi) + log pi(theta | psi) + log pi(y | theta, psi), without 2 pi terms."""
        nat = hp.natural
        Lam = self.lambda_at(nat) if self.has_z else None
        logdet = float(np.sum(np.log(self.fixed_prec)))
        if self.has_z:
            logdet += self.z_logdet(Lam, nat.get("phi"))
        Q0 = self.prior_precision(self.z_precision(nat))
        return hp.log_prior + 0.5 * logdet + self.objective(theta, nat, Q0)

    def _krige_start(self, theta0):
        theta0 = np.asarray(theta0, dtype=float).copy()
        if self.m:
            theta0 = self.project(theta0)
        return theta0

    def log_post_hyper(self, free: np.ndarray, theta0=None) -> tuple[float, LatentApprox | None, HyperPoint]:
        """Unnormalised log pi(psi | y) at internal free coordinates."""
        hp = self.hyper_point(free)
        if not math.isfinite(hp.log_prior):
            return -math.inf, None, hp
        try:
            la = self.laplace(hp, theta0)
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError, ValueError):
            return -math.inf, None, hp
        val = hp.log_prior + la.log_marginal
        if not math.isfinite(val):
            return -math.inf, la, hp
        return val, la, hp

    # -- labels -------------------------------------------------------------------

    def latent_labels(self) -> list[tuple[str, str, str]]:
        """(block, label, outcome) for every coordinate of theta."""
        out = []
        on = self.data.outcome_names
        for j in range(self.k):
            out += [("intercept", lab, on[j]) for lab in self.int_labels]
        for j in range(self.k):
            out += [("beta", nm, on[j]) for nm in self.data.covariate_names]
        if self.has_z:
            for j in range(self.k):
                out += [("z", str(a), on[j]) for a in self.data.lmap.area_labels]
        return out

    def fixed_effect_slice(self) -> slice:
        return slice(0, self.off_z)

    def z_slice(self) -> slice:
        return slice(self.off_z, self.d)


def with_fixed(spec: ModelSpec, **values: float) -> ModelSpec:
    fixed = dict(spec.fixed)
    fixed.update(values)
    return replace(spec, fixed=fixed)
