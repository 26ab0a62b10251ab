"""Moran's I diagnostics and eigenvector-based covariate deconfounding.

Macro-area covariate means are expanded on the per-component Laplacian
eigenbasis. The constant (null-space) part is always dropped, the K
lowest-frequency non-null eigenvectors of each component form the spatial
part, and the remainder is the nonspatial part that replaces the covariate
in the regression.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .graph import AreaGraph, ComponentEigen
from .multilevel import CovariateSet, LevelMap

MORAN_THRESHOLD = 1.645  # 95th percentile of the standard normal


class PatternError(ValueError):
    pass


# -- Moran's I -----------------------------------------------------------------


@dataclass(frozen=True)
class MoranResult:
    I: float
    E0: float
    V0: float

    @property
    def I_std(self) -> float:
        return (self.I - self.E0) / math.sqrt(self.V0)


def moran_null_moments(W: np.ndarray) -> tuple[float, float]:
    """Null mean and variance of Moran's I under the normality assumption."""
    n = W.shape[0]
    S0 = W.sum()
    S1 = 0.5 * np.sum((W + W.T) ** 2)
    S2 = np.sum((W.sum(axis=1) + W.sum(axis=0)) ** 2)
    E0 = -1.0 / (n - 1)
    V0 = (n * n * S1 - n * S2 + 3.0 * S0 * S0) / ((n * n - 1) * S0 * S0) - E0 * E0
    return E0, V0


def moran_i(x: np.ndarray, g: AreaGraph | np.ndarray) -> MoranResult:
    W = g if isinstance(g, np.ndarray) else g.W
    x = np.asarray(x, dtype=float)
    dev = x - x.mean()
    ss = float(dev @ dev)
    if ss <= x.size * (1e-12 * max(1.0, float(np.abs(x).max()))) ** 2:
        raise ValueError("Moran's I is undefined for a constant variable")
    S0 = W.sum()
    I = (x.size / S0) * float(dev @ W @ dev) / ss
    E0, V0 = moran_null_moments(W)
    return MoranResult(I=I, E0=E0, V0=V0)


def standardize_moran(I: float, E0: float, V0: float) -> float:
    return (I - E0) / math.sqrt(V0)


# -- removal patterns ----------------------------------------------------------


@dataclass(frozen=True)
class RemovalPattern:
    """Eigenvector removal counts per covariate and component.

    ``counts[name][c]`` is the number K of lowest-frequency non-null
    eigenvectors removed from covariate ``name`` on component ``c``.
    ``explicit[(name, c)]`` optionally lists 1-based positions in the
    component's decreasing-eigenvalue order instead (the last position is the
    constant vector, which is always removed anyway).
    """

    counts: Mapping[str, tuple[int, ...]]
    explicit: Mapping[tuple[str, int], tuple[int, ...]] = field(default_factory=dict)
    achieved: Mapping[str, float] = field(default_factory=dict, compare=False)
    flags: tuple[str, ...] = field(default=(), compare=False)

    @classmethod
    def zeros(cls, names: Sequence[str], G: int) -> "RemovalPattern":
        return cls(counts={nm: (0,) * G for nm in names})

    def row(self, name: str, G: int) -> list:
        ks = list(self.counts.get(name, (0,) * G))
        if len(ks) != G:
            raise PatternError(f"pattern for {name!r} has {len(ks)} entries, graph has {G} components")
        for c in range(G):
            if (name, c) in self.explicit:
                ks[c] = tuple(self.explicit[(name, c)])
        return ks

    def key(self) -> tuple:
        return tuple(sorted((k, tuple(v)) for k, v in self.counts.items())) + tuple(
            sorted((k, tuple(v)) for k, v in self.explicit.items())
        )

    def with_count(self, name: str, c: int, K: int) -> "RemovalPattern":
        counts = {k: tuple(v) for k, v in self.counts.items()}
        row = list(counts[name])
        row[c] = int(K)
        counts[name] = tuple(row)
        return RemovalPattern(counts=counts, explicit=dict(self.explicit))

    def total(self) -> int:
        return int(sum(sum(v) for v in self.counts.values()))


def _spatial_positions(spec, size: int, c: int) -> np.ndarray:
    """0-based positions (decreasing-eigenvalue order) of the spatial part."""
    if isinstance(spec, (tuple, list, np.ndarray)):
        pos = sorted({int(p) - 1 for p in spec})
        if any(p < 0 or p >= size for p in pos):
            raise PatternError(f"explicit eigenvector position out of range on component {c}")
        return np.array([p for p in pos if p != size - 1], dtype=int)
    K = int(spec)
    if K < 0 or K > size - 1:
        raise PatternError(f"K={K} outside [0, {size - 1}] on component {c} of size {size}")
    return np.arange(size - 1 - K, size - 1, dtype=int)


def decompose_covariate(
    xbar: np.ndarray, eig: ComponentEigen, pattern_row: Sequence
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a macro-area covariate into nonspatial, spatial and null parts."""
    g = eig.graph
    xbar = np.asarray(xbar, dtype=float)
    if len(pattern_row) != g.G:
        raise PatternError(f"pattern row has {len(pattern_row)} entries, graph has {g.G} components")
    x_s = np.zeros(g.n)
    x_0 = np.zeros(g.n)
    for c in range(g.G):
        V = eig.vectors[c]
        size = V.shape[1]
        b = V.T @ xbar
        x_0 += V[:, -1] * b[-1]
        pos = _spatial_positions(pattern_row[c], size, c)
        if pos.size:
            x_s += V[:, pos] @ b[pos]
    x_ns = xbar - x_s - x_0
    return x_ns, x_s, x_0


def deconfounded_design(
    cov: CovariateSet,
    lmap: LevelMap,
    eig: ComponentEigen,
    pattern: RemovalPattern,
    rescale: bool = True,
) -> np.ndarray:
    """xi Xbar_NS + DeltaX, optionally rescaled to the original column sds."""
    G = eig.graph.G
    out = np.empty_like(cov.X)
    for m, name in enumerate(cov.names):
        x_ns, _, _ = decompose_covariate(cov.Xbar[:, m], eig, pattern.row(name, G))
        out[:, m] = lmap.xi @ x_ns + cov.DeltaX[:, m]
    if rescale:
        sd0 = cov.X.std(axis=0, ddof=1)
        sd1 = out.std(axis=0, ddof=1)
        for m, name in enumerate(cov.names):
            if sd1[m] <= 1e-12 * max(sd0[m], 1.0):
                warnings.warn(f"deconfounded column {name!r} has zero variance; left unscaled")
                continue
            out[:, m] *= sd0[m] / sd1[m]
    return out


# -- searches ------------------------------------------------------------------


def _component_order(g: AreaGraph) -> list[int]:
    sizes = g.component_sizes
    return sorted(range(g.G), key=lambda c: (-sizes[c], c))


def default_caps(g: AreaGraph) -> tuple[int, ...]:
    return tuple(int(s) - 1 for s in g.component_sizes)


def search_moran_minimal(
    cov: CovariateSet,
    g: AreaGraph,
    eig: ComponentEigen,
    threshold: float = MORAN_THRESHOLD,
    caps: Sequence[int] | None = None,
) -> RemovalPattern:
    """Smallest removal pattern leaving no evidence of autocorrelation.

    For each covariate, eigenvectors are added one at a time in rounds over
    the components, largest component first ("continent" before "islands"),
    until the standardised Moran's I of the nonspatial part drops below
    ``threshold``. Components at their cap are skipped.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    caps = tuple(default_caps(g) if caps is None else caps)
    order = _component_order(g)
    counts, achieved, flags = {}, {}, []
    for m, name in enumerate(cov.names):
        ks = [0] * g.G

        def istd():
            x_ns, _, _ = decompose_covariate(cov.Xbar[:, m], eig, ks)
            try:
                return moran_i(x_ns, g).I_std
            except ValueError:
                return -math.inf

        val = istd()
        while val >= threshold:
            moved = False
            for c in order:
                if ks[c] < caps[c]:
                    ks[c] += 1
                    moved = True
                    val = istd()
                    if val < threshold:
                        break
            if not moved:
                msg = f"{name}: I_std={val:.4f} still above {threshold} at the caps {caps}"
                warnings.warn(msg)
                flags.append(msg)
                break
        counts[name] = tuple(ks)
        achieved[name] = float(val)
    return RemovalPattern(counts=counts, achieved=achieved, flags=tuple(flags))


@dataclass
class WaicSearchResult:
    pattern: RemovalPattern
    waic: float
    evaluations: int
    exhausted: bool
    history: list = field(default_factory=list)


def search_waic_optimal(
    score: Callable[[RemovalPattern], float],
    names: Sequence[str],
    caps: Sequence[int],
    budget: int = 200,
    start: RemovalPattern | None = None,
    exhaustive: bool = False,
    workers: int = 1,
) -> WaicSearchResult:
    """Coordinate descent on per-covariate, per-component removal counts.

    ``score`` maps a pattern to its WAIC (see :func:`waic_scorer`). Each
    coordinate (covariate, component) is set to the argmin over
    ``0..cap`` with the other counts held fixed; ties go to the smaller K.
    The search stops after a full cycle without change or when ``budget``
    evaluations are spent. ``exhaustive`` enumerates the full product
    instead (only sensible for small caps).
    """
    G = len(caps)
    cache: dict = {}
    history = []
    state = {"exhausted": False}

    def evaluate(patterns):
        todo = [p for p in patterns if p.key() not in cache]
        room = budget - len(cache)
        if len(todo) > room:
            todo = todo[: max(room, 0)]
            state["exhausted"] = True
        if workers > 1 and len(todo) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(workers) as ex:
                vals = list(ex.map(score, todo))
        else:
            vals = [score(p) for p in todo]
        for p, v in zip(todo, vals):
            cache[p.key()] = float(v)
            history.append((p, float(v)))
        return [(cache[p.key()], p) for p in patterns if p.key() in cache]

    current = start or RemovalPattern.zeros(names, G)

    if exhaustive:
        import itertools

        grids = [range(caps[c] + 1) for _ in names for c in range(G)]
        cands = []
        for combo in itertools.product(*grids):
            counts = {nm: tuple(combo[i * G : (i + 1) * G]) for i, nm in enumerate(names)}
            cands.append(RemovalPattern(counts=counts))
        scored = evaluate(cands)
        best_val, best = min(scored, key=lambda t: (t[0], t[1].total(), t[1].key()))
        return WaicSearchResult(best, best_val, len(cache), state["exhausted"], history)

    best_val = evaluate([current])[0][0]
    while True:
        changed = False
        for name in names:
            for c in range(G):
                cands = [current.with_count(name, c, K) for K in range(caps[c] + 1)]
                scored = evaluate(cands)
                if not scored:
                    break
                val, pat = min(scored, key=lambda t: (t[0], t[1].counts[name][c]))
                if pat.key() != current.key() and val < best_val:
                    current, best_val, changed = pat, val, True
            if state["exhausted"]:
                break
        if not changed or state["exhausted"]:
            break
    return WaicSearchResult(current, best_val, len(cache), state["exhausted"], history)


def waic_scorer(spec, data, seed: int = 0, **fit_kw) -> Callable[[RemovalPattern], float]:
    """Score function fitting a Spatial+ model for each candidate pattern."""
    from dataclasses import replace

    from .inference import fit

    def score(pattern: RemovalPattern) -> float:
        s = replace(spec, confounding="spatial_plus", pattern=pattern)
        return fit(s, data, seed=seed, **fit_kw).criteria.waic

    return score
