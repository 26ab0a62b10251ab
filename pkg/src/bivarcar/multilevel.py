"""Two-level bookkeeping: observations -> macro-areas -> graph components."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np


class LevelMapError(ValueError):
    pass


@dataclass(frozen=True)
class LevelMap:
    """Binary maps from observations to macro-areas (``xi``) and from
    macro-areas to connected components (``C``)."""

    xi: np.ndarray
    C: np.ndarray
    area_labels: tuple
    component_labels: tuple

    @property
    def N(self) -> int:
        return self.xi.shape[0]

    @property
    def n(self) -> int:
        return self.xi.shape[1]

    @property
    def G(self) -> int:
        return self.C.shape[1]

    @property
    def counts(self) -> np.ndarray:
        """Observations per macro-area (N_i)."""
        return self.xi.sum(axis=0).astype(int)

    @property
    def area_index(self) -> np.ndarray:
        return np.argmax(self.xi, axis=1)

    @property
    def empty_areas(self) -> list:
        return [self.area_labels[i] for i in np.flatnonzero(self.counts == 0)]

    @property
    def obs_component(self) -> np.ndarray:
        return np.argmax(self.xi @ self.C, axis=1)


def build_levelmap(
    area_of: Sequence[Hashable],
    component_of: Mapping[Hashable, Hashable] | Sequence[Hashable],
    areas: Sequence[Hashable] | None = None,
) -> LevelMap:
    """Build xi and C from per-observation area labels.

    ``component_of`` maps every macro-area label to its component, either as
    a mapping or as a sequence aligned with ``areas``. When ``areas`` is
    omitted the macro-areas are the mapping keys (or ``range(len(seq))``).
    Macro-areas that carry no observation are kept with N_i = 0.
    """
    if isinstance(component_of, Mapping):
        comp_map = dict(component_of)
        if areas is None:
            areas = list(comp_map)
    else:
        seq = list(component_of)
        if areas is None:
            areas = list(range(len(seq)))
        if len(seq) != len(areas):
            raise LevelMapError(f"{len(seq)} component labels for {len(areas)} macro-areas")
        comp_map = {}
        for a, c in zip(areas, seq):
            if a in comp_map and comp_map[a] != c:
                raise LevelMapError(f"macro-area {a!r} assigned to components {comp_map[a]!r} and {c!r}")
            comp_map[a] = c
    areas = list(areas)
    if len(set(areas)) != len(areas):
        raise LevelMapError("duplicate macro-area labels")
    missing = [a for a in areas if a not in comp_map]
    if missing:
        raise LevelMapError(f"macro-areas without a component: {missing[:5]}")
    pos = {a: i for i, a in enumerate(areas)}
    comp_labels = []
    for a in areas:
        if comp_map[a] not in comp_labels:
            comp_labels.append(comp_map[a])
    cpos = {c: j for j, c in enumerate(comp_labels)}

    xi = np.zeros((len(area_of), len(areas)))
    for r, a in enumerate(area_of):
        if a not in pos:
            raise LevelMapError(f"observation {r} references unknown macro-area {a!r}")
        xi[r, pos[a]] = 1.0
    C = np.zeros((len(areas), len(comp_labels)))
    for a in areas:
        C[pos[a], cpos[comp_map[a]]] = 1.0
    return LevelMap(xi=xi, C=C, area_labels=tuple(areas), component_labels=tuple(comp_labels))


def levelmap_from_graph(area_index: Sequence[int], graph) -> LevelMap:
    """LevelMap for observations indexed directly by graph node."""
    return build_levelmap(
        [int(a) for a in area_index], list(graph.components), areas=list(range(graph.n))
    )


@dataclass(frozen=True)
class CovariateSet:
    X: np.ndarray
    names: tuple[str, ...]
    Xbar: np.ndarray
    DeltaX: np.ndarray


def aggregate(
    X: np.ndarray, lmap: LevelMap, names: Sequence[str] | None = None, strict: bool = True
) -> CovariateSet:
    """Split covariates into macro-area means and within-area deviations.

    Xbar = (xi' xi)^-1 xi' X and DeltaX = X - xi Xbar. With ``strict`` an
    empty macro-area makes xi' xi singular and is rejected; otherwise its
    row of Xbar is left at zero (it never enters xi Xbar).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != lmap.N:
        raise LevelMapError(f"X has {X.shape[0]} rows, level map has {lmap.N} observations")
    counts = lmap.counts
    if strict:
        require_observed(lmap, range(lmap.n))
    Xbar = np.zeros((lmap.n, X.shape[1]))
    active = counts > 0
    Xbar[active] = (lmap.xi.T @ X)[active] / counts[active, None]
    DeltaX = X - lmap.xi @ Xbar
    if names is None:
        names = tuple(f"x{j}" for j in range(X.shape[1]))
    return CovariateSet(X=X, names=tuple(names), Xbar=Xbar, DeltaX=DeltaX)


def require_observed(lmap: LevelMap, areas: Sequence[int]) -> None:
    """Reject macro-areas with N_i = 0 among ``areas`` (singular xi'xi)."""
    bad = [lmap.area_labels[i] for i in areas if lmap.counts[i] == 0]
    if bad:
        raise LevelMapError(f"macro-areas without observations in the active set: {bad}")
