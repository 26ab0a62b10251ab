"""Synthetic datasets drawn from the bivariate multilevel model."""
from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .graph import AreaGraph, eigendecompose, islands_lattice, lattice_graph, path_graph, read_adjacency
from .likelihood import SkewNormalSpec, sn_sample
from .multilevel import levelmap_from_graph
from .spatial_prior import covariance_from_params, scale_structure

COVARIATE_KINDS = ("normal", "dummy", "proportion")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Confounding:
    """Add ``strength`` times a standardised eigenvector of ``component`` to
    covariate ``covariate`` (on its linear-predictor scale), and
    ``z_strength`` times the same vector to every outcome's latent field.

    ``position`` counts non-null eigenvectors from the lowest frequency
    (1 is the Fiedler vector).
    """

    covariate: int = 0
    component: int = 0
    strength: float = 2.0
    z_strength: float = 0.0
    position: int = 1


@dataclass(frozen=True)
class Scenario:
    seed: int
    graph: str = "lattice:5x10"
    n_per_area: int = 10
    poisson_sizes: bool = False
    covariates: tuple[str, ...] = ("normal", "dummy")
    beta: tuple[tuple[float, ...], ...] = ((5.0, -3.0), (4.0, 2.0))
    intercepts: tuple[tuple[float, ...], ...] | None = None
    family: str = "icar"
    sigma2: tuple[float, ...] = (20.0, 30.0)
    rho: float = 0.9
    phi: float = 0.9
    omega: tuple[float, ...] = (100.0, 120.0)
    alpha: float = -3.0
    likelihoods: tuple[str, ...] = ("gaussian", "skew_normal")
    confounding: Confounding | None = None
    outcome_names: tuple[str, ...] = ("y_math", "y_ital")
    scaled: bool = True

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)):
            raise ScenarioError("a scenario needs an integer seed")
        k = len(self.likelihoods)
        if len(self.sigma2) != k or len(self.omega) != k or len(self.beta) != k:
            raise ScenarioError("sigma2, omega and beta need one entry per outcome")
        if any(v <= 0 for v in self.sigma2) or any(v <= 0 for v in self.omega):
            raise ScenarioError("variances must be positive")
        if not -1.0 < self.rho < 1.0:
            raise ScenarioError("|rho| must be below 1")
        if self.family == "pcar" and not 0.0 < self.phi < 1.0:
            raise ScenarioError("phi must lie in (0, 1)")
        for kind in self.covariates:
            if kind not in COVARIATE_KINDS:
                raise ScenarioError(f"unknown covariate kind {kind!r}")
        if any(len(b) != len(self.covariates) for b in self.beta):
            raise ScenarioError("each beta row needs one entry per covariate")
        if self.n_per_area < 1:
            raise ScenarioError("n_per_area must be positive")

    @property
    def k(self) -> int:
        return len(self.likelihoods)

    def build_graph(self, base: Path | None = None) -> AreaGraph:
        return graph_from_spec(self.graph, base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confounding"] = asdict(self.confounding) if self.confounding else None
        return d


def graph_from_spec(spec: str, base: Path | None = None) -> AreaGraph:
    """``lattice:RxC``, ``path:N``, ``islands:RxC+a+b`` or ``file:PATH``."""
    kind, _, arg = spec.partition(":")
    try:
        if kind == "lattice":
            r, c = arg.lower().split("x")
            return lattice_graph(int(r), int(c))
        if kind == "path":
            return path_graph(int(arg))
        if kind == "islands":
            main, *isl = arg.split("+")
            r, c = main.lower().split("x")
            return islands_lattice(int(r), int(c), tuple(int(v) for v in isl))
        if kind == "file":
            p = Path(arg)
            if base is not None and not p.is_absolute():
                p = base / p
            return read_adjacency(p)
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"bad graph spec {spec!r}: {exc}") from exc
    raise ScenarioError(f"unknown graph spec {spec!r}")


# -- latent fields -------------------------------------------------------------


def sample_constrained_icar(
    g: AreaGraph,
    Sigma: np.ndarray,
    seed: int | np.random.Generator,
    size: int | None = None,
    scaled: bool = True,
) -> np.ndarray:
    """Draw z from the intrinsic CAR prior with covariance Sigma kron R+.

    Independent normals on the non-null eigenvectors of each component, with
    variance one over the eigenvalue, are mixed across outcomes by a
    Cholesky factor of ``Sigma`` (= Lambda^-1). Every draw sums to zero on
    every component. Returns an n x k array, or size x n x k.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    k = Sigma.shape[0]
    L = np.linalg.cholesky(Sigma)
    eig = eigendecompose(g)
    factors = scale_structure(g).factors if scaled else np.ones(g.G)
    cols, sds = [], []
    for c in range(g.G):
        lam, U = eig.nonnull(c)
        cols.append(U)
        sds.append(1.0 / np.sqrt(factors[c] * lam))
    U = np.hstack(cols) if cols else np.zeros((g.n, 0))
    sd = np.concatenate(sds) if sds else np.zeros(0)
    m = size or 1
    E = rng.standard_normal((m, U.shape[1], k))
    Z = np.einsum("ij,mjk,lk->mil", U, sd[None, :, None] * E, L)
    # remove rounding drift so the constraints hold to machine precision
    for c in range(g.G):
        idx = g.members(c)
        Z[:, idx, :] -= Z[:, idx, :].mean(axis=1, keepdims=True)
    return Z[0] if size is None else Z


def sample_pcar(g: AreaGraph, Sigma: np.ndarray, phi: float, rng: np.random.Generator) -> np.ndarray:
    Q = g.D - phi * g.W
    Lq = np.linalg.cholesky(Q)
    L = np.linalg.cholesky(np.atleast_2d(Sigma))
    E = rng.standard_normal((g.n, L.shape[0]))
    return np.linalg.solve(Lq.T, E) @ L.T


def standardized_eigenvector(g: AreaGraph, component: int, position: int = 1) -> np.ndarray:
    """Non-null eigenvector ``position`` (1 = lowest frequency) of a component,
    scaled to unit root-mean-square over the component's nodes."""
    eig = eigendecompose(g)
    lam, U = eig.nonnull(component)
    if not 1 <= position <= lam.size:
        raise ScenarioError(f"component {component} has {lam.size} non-null eigenvectors")
    v = U[:, lam.size - position]
    return v * math.sqrt(g.members(component).size)


# -- datasets ------------------------------------------------------------------


@dataclass
class SimulatedData:
    scenario: Scenario
    graph: AreaGraph
    area_of: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    covariate_names: tuple[str, ...]
    truth: dict = field(default_factory=dict)

    def dataset(self):
        from .inference.model import Dataset

        return Dataset(
            graph=self.graph,
            lmap=levelmap_from_graph(self.area_of, self.graph),
            X=self.X,
            Y=self.Y,
            covariate_names=self.covariate_names,
            outcome_names=self.scenario.outcome_names,
            obs_ids=tuple(range(self.area_of.size)),
        )

    def write(self, outdir: str | Path) -> dict:
        """Write observations.csv, adjacency.txt and truth.json; return paths."""
        from .io import write_observations

        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        from .graph import write_adjacency

        paths = {
            "observations": out / "observations.csv",
            "adjacency": out / "adjacency.txt",
            "truth": out / "truth.json",
        }
        write_observations(
            paths["observations"],
            obs_ids=list(range(self.area_of.size)),
            areas=[int(a) for a in self.area_of],
            X=self.X,
            covariate_names=self.covariate_names,
            Y=self.Y,
            outcome_names=self.scenario.outcome_names,
            kinds=dict(zip(self.covariate_names, self.scenario.covariates)),
        )
        write_adjacency(self.graph, paths["adjacency"], comment=f"simulated, seed {self.scenario.seed}")
        paths["truth"].write_text(json.dumps(self.truth, indent=2, sort_keys=True) + "\n")
        return {k: str(v) for k, v in paths.items()}


def _covariate(kind: str, shift: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One observation-level covariate with an area-level linear-predictor shift."""
    N = shift.size
    if kind == "normal":
        return rng.standard_normal(N) + shift
    if kind == "dummy":
        return (rng.random(N) < expit(logit(0.4) + shift)).astype(float)
    # proportion: logit-normal around 0.5
    return expit(0.5 * rng.standard_normal(N) + shift)


def generate(scenario: Scenario, base: Path | None = None) -> SimulatedData:
    """Draw one dataset: y = X beta + xi C beta_C + xi z + eps."""
    rng = np.random.default_rng(scenario.seed)
    g = scenario.build_graph(base)
    k = scenario.k
    if scenario.poisson_sizes:
        sizes = 1 + rng.poisson(scenario.n_per_area - 1, size=g.n)
    else:
        sizes = np.full(g.n, scenario.n_per_area)
    area_of = np.repeat(np.arange(g.n), sizes)
    N = area_of.size

    conf = scenario.confounding
    v = None
    if conf is not None:
        if not 0 <= conf.covariate < len(scenario.covariates):
            raise ScenarioError("confounded covariate index out of range")
        v = standardized_eigenvector(g, conf.component, conf.position)

    X = np.empty((N, len(scenario.covariates)))
    for m, kind in enumerate(scenario.covariates):
        shift = np.zeros(N)
        if conf is not None and conf.covariate == m:
            shift = conf.strength * v[area_of]
        X[:, m] = _covariate(kind, shift, rng)
    names = tuple(f"x{m + 1}" for m in range(X.shape[1]))

    Sigma = covariance_from_params(np.log(scenario.sigma2), math.atanh(scenario.rho) if k == 2 else None)
    if scenario.family == "icar":
        z = sample_constrained_icar(g, Sigma, rng, scaled=scenario.scaled)
    elif scenario.family == "pcar":
        z = sample_pcar(g, Sigma, scenario.phi, rng)
    elif scenario.family == "iid":
        z = rng.standard_normal((g.n, k)) @ np.linalg.cholesky(Sigma).T
    elif scenario.family == "null":
        z = np.zeros((g.n, k))
    else:
        raise ScenarioError(f"unknown family {scenario.family!r}")
    if conf is not None and conf.z_strength:
        z = z + conf.z_strength * v[:, None] * np.sqrt(np.asarray(scenario.sigma2))[None, :]

    if scenario.intercepts is not None:
        ints = np.asarray(scenario.intercepts, dtype=float)
    elif scenario.family == "pcar":
        ints = np.full((k, 1), 180.0)
    else:
        ints = np.tile(180.0 + 5.0 * np.arange(g.G), (k, 1))
    if ints.shape[1] not in (1, g.G):
        raise ScenarioError("intercepts need one entry or one per component")
    comp = g.components[area_of]

    beta = np.asarray(scenario.beta, dtype=float)
    Y = np.empty((N, k))
    for j in range(k):
        mu = X @ beta[j] + (ints[j, comp] if ints.shape[1] == g.G else ints[j, 0]) + z[area_of, j]
        om = scenario.omega[j]
        if scenario.likelihoods[j] == "skew_normal":
            eps = sn_sample(rng, N, SkewNormalSpec.from_moments(om, scenario.alpha))
        else:
            eps = math.sqrt(om) * rng.standard_normal(N)
        Y[:, j] = mu + eps

    truth = {
        "scenario": scenario.to_dict(),
        "beta": beta.tolist(),
        "intercepts": ints.tolist(),
        "z": z.T.tolist(),
        "psi": {
            **{f"sigma2_{j + 1}": float(scenario.sigma2[j]) for j in range(k)},
            **({"rho": float(scenario.rho)} if k == 2 else {}),
            **{f"omega_{j + 1}": float(scenario.omega[j]) for j in range(k)},
            "alpha": float(scenario.alpha),
            **({"phi": float(scenario.phi)} if scenario.family == "pcar" else {}),
        },
        "covariate_names": list(names),
    }
    return SimulatedData(scenario, g, area_of, X, Y, names, truth)


# -- scenario files ------------------------------------------------------------


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _rows(text: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(r) for r in text.split(";") if r.strip())


def read_scenario(path: str | Path) -> Scenario:
    """Read an INI-style scenario file (section ``[scenario]``, optional
    ``[confounding]``). Row-valued entries separate outcomes with ``;``."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ScenarioError(f"cannot read scenario file {path}")
    if "scenario" not in cp:
        raise ScenarioError("scenario file needs a [scenario] section")
    s = cp["scenario"]
    if "seed" not in s:
        raise ScenarioError("scenario seed is mandatory")
    kw: dict = {"seed": s.getint("seed")}
    if "graph" in s:
        kw["graph"] = s["graph"]
    if "n_per_area" in s:
        kw["n_per_area"] = s.getint("n_per_area")
    if "poisson_sizes" in s:
        kw["poisson_sizes"] = s.getboolean("poisson_sizes")
    if "covariates" in s:
        kw["covariates"] = tuple(s["covariates"].replace(",", " ").split())
    if "beta" in s:
        kw["beta"] = _rows(s["beta"])
    if "intercepts" in s:
        kw["intercepts"] = _rows(s["intercepts"])
    for key in ("family",):
        if key in s:
            kw[key] = s[key]
    for key in ("sigma2", "omega"):
        if key in s:
            kw[key] = _floats(s[key])
    for key in ("rho", "phi", "alpha"):
        if key in s:
            kw[key] = s.getfloat(key)
    if "likelihoods" in s:
        kw["likelihoods"] = tuple(s["likelihoods"].replace(",", " ").split())
    if "outcome_names" in s:
        kw["outcome_names"] = tuple(s["outcome_names"].replace(",", " ").split())
    if "scaled" in s:
        kw["scaled"] = s.getboolean("scaled")
    if "confounding" in cp:
        c = cp["confounding"]
        kw["confounding"] = Confounding(
            covariate=c.getint("covariate", 0),
            component=c.getint("component", 0),
            strength=c.getfloat("strength", 2.0),
            z_strength=c.getfloat("z_strength", 0.0),
            position=c.getint("position", 1),
        )
    try:
        return Scenario(**kw)
    except TypeError as exc:
        raise ScenarioError(str(exc)) from exc


def replicate_seeds(seed: int, count: int) -> list[int]:
    """Independent child seeds for replicate studies."""
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(count)]


def with_seed(scenario: Scenario, seed: int) -> Scenario:
    from dataclasses import replace

    return replace(scenario, seed=int(seed))


__all__: Sequence[str] = (
    "Confounding",
    "Scenario",
    "ScenarioError",
    "SimulatedData",
    "generate",
    "graph_from_spec",
    "read_scenario",
    "replicate_seeds",
    "sample_constrained_icar",
    "standardized_eigenvector",
    "with_seed",
)
