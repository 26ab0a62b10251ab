"""Precision structures and linear constraints for the latent areal field.

The latent field is stored outcome-major, z = (z_1, ..., z_k), so the joint
precision of a multivariate CAR is ``kron(Lambda, S)`` with S the n x n
spatial structure matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import multigammaln

from .graph import AreaGraph, DegenerateBlockError, component_pseudoinverse_diag

FAMILIES = ("null", "iid", "indep_icar", "icar", "pcar")


class PriorError(ValueError):
    pass


# -- scaling -------------------------------------------------------------------


@dataclass(frozen=True)
class ScaledStructure:
    R: np.ndarray
    factors: np.ndarray
    flagged: tuple[int, ...]


def scale_structure(g: AreaGraph) -> ScaledStructure:
    """Scale each component block of the Laplacian to unit typical variance.

    The factor for a component is the geometric mean of the diagonal of the
    block's pseudoinverse; after multiplying the block by it, the geometric
    mean of the constrained marginal variances is one. Single-node
    components keep factor 1 and are reported in ``flagged``.
    """
    R = g.R.copy()
    factors = np.ones(g.G)
    flagged = []
    for c in range(g.G):
        try:
            v = component_pseudoinverse_diag(g, c)
        except DegenerateBlockError:
            flagged.append(c)
            continue
        factors[c] = math.exp(np.mean(np.log(v)))
        idx = g.members(c)
        R[np.ix_(idx, idx)] *= factors[c]
    return ScaledStructure(R=R, factors=factors, flagged=tuple(flagged))


# -- between-outcome precision -------------------------------------------------


def covariance_from_params(log_var: np.ndarray, atanh_rho: float | None = None) -> np.ndarray:
    """Sigma = Lambda^-1 from log-variances and the Fisher-z of the correlation."""
    sd = np.exp(0.5 * np.asarray(log_var, dtype=float))
    k = sd.size
    corr = np.eye(k)
    if k == 2:
        corr[0, 1] = corr[1, 0] = math.tanh(atanh_rho)
    elif k > 2:
        raise NotImplementedError("only k <= 2 outcomes are parameterised")
    return corr * np.outer(sd, sd)


def lambda_from_params(log_var: np.ndarray, atanh_rho: float | None = None) -> np.ndarray:
    return np.linalg.inv(covariance_from_params(log_var, atanh_rho))


def check_spd(M: np.ndarray, what: str = "Lambda") -> None:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.allclose(M, M.T, rtol=1e-12, atol=1e-12):
        raise PriorError(f"{what} must be a symmetric square matrix")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise PriorError(f"{what} is not positive definite") from exc


def wishart_logpdf(Lam: np.ndarray, df: float, scale: np.ndarray | None = None) -> float:
    """Wishart log-density, parameterised so that E[Lambda] = df * scale."""
    k = Lam.shape[0]
    S = np.eye(k) if scale is None else np.asarray(scale, dtype=float)
    _, logdet_L = np.linalg.slogdet(Lam)
    _, logdet_S = np.linalg.slogdet(S)
    tr = np.trace(np.linalg.solve(S, Lam))
    return (
        0.5 * (df - k - 1) * logdet_L
        - 0.5 * tr
        - 0.5 * df * k * math.log(2.0)
        - 0.5 * df * logdet_S
        - multigammaln(0.5 * df, k)
    )


def log_prior_lambda_internal(theta: np.ndarray, df: float, scale: np.ndarray | None = None) -> float:
    """Wishart prior on Lambda expressed on (log s1^2, log s2^2, atanh rho).

    Includes the Jacobian of the map to Lambda = Sigma^-1:
    |dLambda/dSigma| = |Sigma|^-(k+1) and
    |dSigma/dtheta| = s1^2 s2^2 (1 - rho^2) s1 s2.
    """
    a, b, t = (float(v) for v in theta)
    rho = math.tanh(t)
    Sig = covariance_from_params(np.array([a, b]), t)
    Lam = np.linalg.inv(Sig)
    one_m_r2 = 1.0 - rho * rho
    if one_m_r2 <= 0:
        return -math.inf
    logdet_sig = a + b + math.log(one_m_r2)
    log_jac = -3.0 * logdet_sig + a + b + math.log(one_m_r2) + 0.5 * (a + b)
    return wishart_logpdf(Lam, df, scale) + log_jac


def log_prior_flat_sd(log_var: float, sd_min: float = 1e-6) -> float:
    """Improper uniform prior on a standard deviation, on the log-variance scale."""
    if 0.5 * log_var < math.log(sd_min):
        return -math.inf
    return 0.5 * log_var


# -- latent precisions ---------------------------------------------------------


@dataclass(frozen=True)
class LatentPrecision:
    family: str
    k: int
    structure: np.ndarray
    Lambda: np.ndarray
    scaled: bool = False
    phi: float | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.structure.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        if "Q" not in self._cache:
            self._cache["Q"] = np.kron(self.Lambda, self.structure)
        return self._cache["Q"]

    def conditional(self, i: int, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean and precision of z_i (a k-vector) given all other sites.

        ``z`` is an n x k array. Read off the joint precision:
        precision S_ii Lambda, mean -S_ii^-1 sum_{j != i} S_ij z_j.
        """
        S = self.structure
        z = np.asarray(z, dtype=float).reshape(self.n, self.k)
        row = S[i].copy()
        row[i] = 0.0
        mean = -(row @ z) / S[i, i]
        return mean, S[i, i] * self.Lambda


def build_icar_precision(g: AreaGraph, Lambda: np.ndarray, scaled: bool = True) -> LatentPrecision:
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    check_spd(Lambda)
    S = scale_structure(g).R if scaled else g.R
    return LatentPrecision(family="icar", k=Lambda.shape[0], structure=S, Lambda=Lambda, scaled=scaled)


def build_pcar_precision(g: AreaGraph, Lambda: np.ndarray, phi: float) -> LatentPrecision:
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    check_spd(Lambda)
    if not 0.0 < phi < 1.0:
        raise PriorError(f"phi must lie in (0, 1), got {phi}")
    if np.any(g.degrees == 0):
        raise PriorError("proper CAR needs every area to have a neighbour")
    S = g.D - phi * g.W
    return LatentPrecision(family="pcar", k=Lambda.shape[0], structure=S, Lambda=Lambda, phi=float(phi))


def build_iid_precision(n: int, Lambda: np.ndarray) -> LatentPrecision:
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    check_spd(Lambda)
    return LatentPrecision(family="iid", k=Lambda.shape[0], structure=np.eye(n), Lambda=Lambda)


def pcar_logdet_table(g: AreaGraph) -> tuple[float, np.ndarray]:
    """(sum log d_i, eigenvalues of D^-1/2 W D^-1/2) for fast log|D - phi W|."""
    d = g.degrees
    if np.any(d == 0):
        raise PriorError("proper CAR needs every area to have a neighbour")
    s = 1.0 / np.sqrt(d)
    nu = np.linalg.eigvalsh(s[:, None] * g.W * s[None, :])
    return float(np.sum(np.log(d))), nu


# -- constraints ---------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintSet:
    A: np.ndarray
    kind: str

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def rhs(self) -> np.ndarray:
        return np.zeros(self.m)

    def residual(self, z: np.ndarray) -> float:
        if self.m == 0:
            return 0.0
        return float(np.max(np.abs(self.A @ np.asarray(z).ravel())))


class RankDeficientDesign(PriorError):
    def __init__(self, dependent: list[int]):
        self.dependent = dependent
        super().__init__(f"X_tot is rank deficient; dependent columns: {dependent}")


def dependent_columns(X: np.ndarray, rtol: float = 1e-10) -> list[int]:
    """Columns that are linear combinations of earlier ones (pivoted QR)."""
    _, Rq, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rq))
    tol = rtol * (diag[0] if diag.size else 1.0)
    rank = int(np.sum(diag > tol))
    return sorted(int(c) for c in piv[rank:])


def _row_basis(M: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    if M.size == 0:
        return M.reshape(0, M.shape[1])
    _, sv, Vt = np.linalg.svd(M, full_matrices=False)
    rank = int(np.sum(sv > rtol * sv[0])) if sv.size and sv[0] > 0 else 0
    return Vt[:rank]


def build_constraints(
    kind: str,
    g: AreaGraph,
    lmap=None,
    X_tot: np.ndarray | None = None,
    k: int = 2,
) -> ConstraintSet:
    """Linear constraints A z = 0 on the outcome-major latent vector.

    ``sum_to_zero``: one row per outcome and component, summing z over the
    component. ``rsr``: the rows of X_tot' xi for each outcome, reduced to an
    orthonormal basis of their span; this is equivalent to requiring that the
    projection of xi z on the column space of X_tot vanishes.
    """
    n = g.n
    if kind == "none":
        return ConstraintSet(A=np.zeros((0, k * n)), kind=kind)
    if kind == "sum_to_zero":
        rows = []
        for j in range(k):
            for c in range(g.G):
                r = np.zeros(k * n)
                r[j * n + g.members(c)] = 1.0
                rows.append(r)
        return ConstraintSet(A=np.array(rows), kind=kind)
    if kind == "rsr":
        if lmap is None or X_tot is None:
            raise PriorError("rsr constraints need the level map and X_tot")
        X_tot = np.asarray(X_tot, dtype=float)
        dep = dependent_columns(X_tot)
        if dep:
            raise RankDeficientDesign(dep)
        block = _row_basis(X_tot.T @ lmap.xi)
        A = np.kron(np.eye(k), block)
        return ConstraintSet(A=A, kind=kind)
    raise PriorError(f"unknown constraint kind {kind!r}")


def null_basis(A: np.ndarray, dim: int) -> np.ndarray:
    """Orthonormal basis (dim x (dim - rank A)) of the null space of A."""
    if A.shape[0] == 0:
        return np.eye(dim)
    return linalg.null_space(A, rcond=1e-10)
