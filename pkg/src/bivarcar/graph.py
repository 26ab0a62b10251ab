"""Neighbourhood graphs of macro-areas.

Builds the binary proximity matrix, degree matrix and Laplacian of an
undirected areal graph, labels its connected components, and exposes the
per-component spectral quantities used by the spatial priors and by the
covariate decomposition.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

ZERO_EIG_RTOL = 1e-9


class GraphError(ValueError):
    pass


class DegenerateBlockError(GraphError):
    """Raised for operations that are undefined on a single-node component."""


@dataclass(frozen=True)
class AreaGraph:
    n: int
    edges: tuple[tuple[int, int], ...]
    W: np.ndarray
    components: np.ndarray
    G: int

    @property
    def degrees(self) -> np.ndarray:
        return self.W.sum(axis=1)

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.degrees)

    @property
    def R(self) -> np.ndarray:
        return self.D - self.W

    def members(self, c: int) -> np.ndarray:
        """Indices of the nodes in component ``c`` (ascending)."""
        return np.flatnonzero(self.components == c)

    @property
    def component_sizes(self) -> np.ndarray:
        return np.bincount(self.components, minlength=self.G)

    @property
    def singletons(self) -> list[int]:
        return [c for c in range(self.G) if self.component_sizes[c] == 1]

    @property
    def C(self) -> np.ndarray:
        """n x G binary component-membership matrix."""
        out = np.zeros((self.n, self.G))
        out[np.arange(self.n), self.components] = 1.0
        return out

    def block(self, c: int) -> np.ndarray:
        idx = self.members(c)
        return self.R[np.ix_(idx, idx)]


def build_graph(n: int, edges: Iterable[Sequence[int]]) -> AreaGraph:
    """Build an :class:`AreaGraph` from an edge list.

    Duplicate edges (in either orientation) are collapsed. Self-loops and
    out-of-range indices are rejected.
    """
    n = int(n)
    if n < 1:
        raise GraphError(f"graph needs at least one node, got n={n}")
    seen: set[tuple[int, int]] = set()
    for e in edges:
        i, j = (int(v) for v in e)
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"edge ({i}, {j}) has an index outside [0, {n})")
        if i == j:
            raise GraphError(f"self-loop at node {i} in edge ({i}, {j})")
        seen.add((min(i, j), max(i, j)))
    canon = tuple(sorted(seen))
    W = np.zeros((n, n))
    for i, j in canon:
        W[i, j] = W[j, i] = 1.0
    G, labels = connected_components(csr_matrix(W), directed=False)
    # relabel so that components are numbered by their smallest node
    order = {}
    for lab in labels:
        if lab not in order:
            order[lab] = len(order)
    comps = np.array([order[lab] for lab in labels], dtype=int)
    return AreaGraph(n=n, edges=canon, W=W, components=comps, G=int(G))


def lattice_graph(rows: int, cols: int) -> AreaGraph:
    """Rook-adjacency lattice, nodes numbered row-major."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return build_graph(rows * cols, edges)


def path_graph(n: int) -> AreaGraph:
    return build_graph(n, [(i, i + 1) for i in range(n - 1)])


def disjoint_union(*graphs: AreaGraph) -> AreaGraph:
    """Place graphs side by side; node indices are offset in argument order."""
    edges, offset = [], 0
    for g in graphs:
        edges.extend((i + offset, j + offset) for i, j in g.edges)
        offset += g.n
    return build_graph(offset, edges)


def islands_lattice(rows: int = 4, cols: int = 4, islands: Sequence[int] = (2, 2)) -> AreaGraph:
    """A rook lattice 'mainland' plus path-graph 'islands'.

    The default (4x4 + 2 + 2) has 20 areas in 3 components, a desk-scale
    stand-in for a mainland with two islands.
    """
    return disjoint_union(lattice_graph(rows, cols), *(path_graph(k) for k in islands))


# -- spectral quantities -------------------------------------------------------


@dataclass(frozen=True)
class ComponentEigen:
    """Per-component eigendecomposition of the Laplacian.

    ``values[c]`` are sorted in decreasing order, so the null-space
    eigenvalue (zero) is last and the Fiedler value is second to last.
    ``vectors[c]`` is an n x n_c matrix whose columns are the matching
    eigenvectors embedded in the full node space (zero outside ``c``).
    """

    graph: AreaGraph
    values: tuple[np.ndarray, ...]
    vectors: tuple[np.ndarray, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def nonnull(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        """Non-null eigenpairs of component ``c`` (decreasing eigenvalue)."""
        return self.values[c][:-1], self.vectors[c][:, :-1]

    def null_vector(self, c: int) -> np.ndarray:
        return self.vectors[c][:, -1]

    def full(self) -> tuple[np.ndarray, np.ndarray]:
        """All eigenpairs stacked component by component."""
        if "full" not in self._cache:
            self._cache["full"] = (np.concatenate(self.values), np.hstack(self.vectors))
        return self._cache["full"]


def _fix_signs(V: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    V = V.copy()
    for j in range(V.shape[1]):
        nz = np.flatnonzero(np.abs(V[:, j]) > tol)
        if nz.size and V[nz[0], j] < 0:
            V[:, j] = -V[:, j]
    return V


def eigendecompose(g: AreaGraph) -> ComponentEigen:
    values, vectors = [], []
    for c in range(g.G):
        idx = g.members(c)
        block = g.R[np.ix_(idx, idx)]
        lam, U = np.linalg.eigh(block)
        order = np.argsort(-lam, kind="stable")
        lam, U = lam[order], U[:, order]
        # the last eigenpair spans the null space: pin it exactly
        lam[-1] = 0.0
        U[:, -1] = 1.0 / np.sqrt(idx.size)
        U = _fix_signs(U)
        full = np.zeros((g.n, idx.size))
        full[idx, :] = U
        values.append(lam)
        vectors.append(full)
    return ComponentEigen(graph=g, values=tuple(values), vectors=tuple(vectors))


def count_zero_eigenvalues(M: np.ndarray, rtol: float = ZERO_EIG_RTOL) -> int:
    lam = np.linalg.eigvalsh(M)
    scale = max(np.max(np.abs(lam)), 1.0)
    return int(np.sum(np.abs(lam) < rtol * scale))


def component_pseudoinverse_diag(g: AreaGraph, c: int) -> np.ndarray:
    """Diagonal of the Moore-Penrose pseudoinverse of a component's Laplacian block.

    This is the vector of marginal variances of a unit-precision ICAR field
    on the component under the sum-to-zero constraint.
    """
    idx = g.members(c)
    if idx.size < 2:
        raise DegenerateBlockError(f"component {c} is a single node; its Laplacian block is null")
    block = g.R[np.ix_(idx, idx)]
    # R+ = (R + J/m)^-1 - J/m for a connected block, J the all-ones matrix
    m = idx.size
    J = np.full((m, m), 1.0 / m)
    return np.diag(np.linalg.inv(block + J) - J).copy()


# -- adjacency file ------------------------------------------------------------


def read_adjacency(path: str | Path) -> AreaGraph:
    """Read an adjacency file: header ``n=<count>``, then ``i j`` per line."""
    n = None
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("n="):
            n = int(line[2:])
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"{path}:{lineno}: expected 'i j', got {raw!r}")
        edges.append((int(parts[0]), int(parts[1])))
    if n is None:
        raise GraphError(f"{path}: missing 'n=<count>' header")
    return build_graph(n, edges)


def write_adjacency(g: AreaGraph, path: str | Path, comment: str | None = None) -> None:
    lines = []
    if comment:
        lines.extend(f"# {c}" for c in comment.splitlines())
    lines.append(f"n={g.n}")
    lines.extend(f"{i} {j}" for i, j in g.edges)
    Path(path).write_text("\n".join(lines) + "\n")
