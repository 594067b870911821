"""Slope-unit adjacency graphs and intrinsic-CAR machinery.

The graph is the areal support of every field in the model: nodes are slope
units, edges are shared borders (binary weights).  The intrinsic CAR prior on
a field ``w`` with precision ``tau`` has unnormalized log-density

    ((n - c)/2) * log(tau) - (tau/2) * sum_{i~j} (w_i - w_j)^2

where ``c`` is the number of connected components (the rank deficiency of the
graph Laplacian).  Identifiability is imposed by centering ``w`` to mean zero
within every component; an isolated unit forms a singleton component and its
effect is pinned to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import ContractError, IngestionError, ParameterError

__all__ = [
    "SlopeUnitGraph",
    "IcarField",
    "CovariateMatrix",
    "build_graph",
    "build_covariates",
    "icar_quadform",
    "icar_logdensity",
    "center_by_component",
    "simulate_icar",
    "lattice_edges",
    "path_edges",
]


@dataclass(frozen=True)
class SlopeUnitGraph:
    """Undirected slope-unit adjacency with precomputed component structure."""

    n: int
    edges: np.ndarray  # (n_edges, 2) int64, i < j, lexicographically sorted
    degrees: np.ndarray  # (n,) int64
    component_labels: np.ndarray  # (n,) int64, component id per node
    n_components: int
    labels: tuple = ()

    @property
    def n_edges(self):
        return self.edges.shape[0]

    @property
    def rank(self):
        """Rank of the graph Laplacian: n minus the component count."""
        return self.n - self.n_components

    @property
    def components(self):
        """List of node-index arrays, one per connected component."""
        order = np.argsort(self.component_labels, kind="stable")
        bounds = np.searchsorted(self.component_labels[order], np.arange(self.n_components + 1))
        return [order[bounds[k] : bounds[k + 1]] for k in range(self.n_components)]

    @property
    def isolated(self):
        return np.flatnonzero(self.degrees == 0)

    def adjacency(self):
        """Sparse CSR adjacency matrix (binary, symmetric)."""
        if self.n_edges == 0:
            return sparse.csr_matrix((self.n, self.n))
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * self.n_edges)
        return sparse.csr_matrix(
            (data, (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(self.n, self.n)
        )

    def laplacian(self):
        """Dense graph Laplacian D - A (small graphs / oracles only)."""
        lap = np.zeros((self.n, self.n))
        for i, j in self.edges:
            lap[i, i] += 1.0
            lap[j, j] += 1.0
            lap[i, j] -= 1.0
            lap[j, i] -= 1.0
        return lap


@dataclass
class IcarField:
    """A latent spatial effect with its precision."""

    w: np.ndarray
    tau: float


def build_graph(edge_list, n, labels=None):
    """Canonicalize an edge list into a :class:`SlopeUnitGraph`.

    Accepts duplicated pairs in either orientation; rejects self-loops and
    out-of-range indices.  Isolated nodes are allowed and end up as singleton
    components.
    """
    if n < 0:
        raise ContractError(f"node count must be >= 0, got {n}")
    canon = set()
    for k, (i, j) in enumerate(edge_list):
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n):
            raise IngestionError(f"edge ({i}, {j}) references a unit outside [0, {n})", line=k + 1)
        if i == j:
            raise IngestionError(f"self-loop on unit {i}", line=k + 1)
        canon.add((min(i, j), max(i, j)))
    if canon:
        edges = np.array(sorted(canon), dtype=np.int64)
    else:
        edges = np.empty((0, 2), dtype=np.int64)

    degrees = np.bincount(edges.ravel(), minlength=n).astype(np.int64) if n else np.empty(0, np.int64)

    if n == 0:
        comp_labels = np.empty(0, dtype=np.int64)
        n_comp = 0
    else:
        adj = sparse.csr_matrix(
            (np.ones(2 * len(edges)), (np.concatenate([edges[:, 0], edges[:, 1]]),
                                       np.concatenate([edges[:, 1], edges[:, 0]]))),
            shape=(n, n),
        ) if len(edges) else sparse.csr_matrix((n, n))
        n_comp, comp_labels = connected_components(adj, directed=False)
        comp_labels = comp_labels.astype(np.int64)

    if labels is None:
        labels = tuple(str(i) for i in range(n))
    else:
        labels = tuple(labels)
        if len(labels) != n:
            raise ContractError(f"expected {n} labels, got {len(labels)}")
    return SlopeUnitGraph(
        n=n,
        edges=edges,
        degrees=degrees,
        component_labels=comp_labels,
        n_components=int(n_comp),
        labels=labels,
    )


def icar_quadform(w, graph: SlopeUnitGraph):
    """Pairwise-difference quadratic form sum_{i~j} (w_i - w_j)^2 = w'Qw."""
    w = np.asarray(w, dtype=float)
    if w.shape != (graph.n,):
        raise ContractError(f"field length {w.shape} does not match graph n={graph.n}")
    if graph.n_edges == 0:
        return 0.0
    diff = w[graph.edges[:, 0]] - w[graph.edges[:, 1]]
    return float(diff @ diff)


def icar_logdensity(fld: IcarField, graph: SlopeUnitGraph):
    """Intrinsic-CAR log-density up to an additive constant.

    Assumes the field is centered per component; the precision contributes
    through the Laplacian rank n - c.
    """
    if not (np.isfinite(fld.tau) and fld.tau > 0):
        raise ParameterError(f"icar precision must be finite and > 0, got {fld.tau}")
    quad = icar_quadform(fld.w, graph)
    return 0.5 * graph.rank * np.log(fld.tau) - 0.5 * fld.tau * quad


def center_by_component(w, graph: SlopeUnitGraph):
    """Subtract the mean of w within each connected component (idempotent)."""
    w = np.asarray(w, dtype=float)
    if w.shape != (graph.n,):
        raise ContractError(f"field length {w.shape} does not match graph n={graph.n}")
    if graph.n == 0:
        return w.copy()
    sums = np.bincount(graph.component_labels, weights=w, minlength=graph.n_components)
    sizes = np.bincount(graph.component_labels, minlength=graph.n_components)
    return w - (sums / sizes)[graph.component_labels]


def simulate_icar(tau, graph: SlopeUnitGraph, rng_seed):
    """Draw a centered intrinsic-CAR field by per-component eigen-decomposition.

    Covariance on the constraint subspace equals the pseudo-inverse of
    tau * Laplacian.  Dense decomposition: intended for synthesis and tests
    at desk scale, not for fitting.
    """
    if not (np.isfinite(tau) and tau > 0):
        raise ParameterError(f"icar precision must be finite and > 0, got {tau}")
    if graph.n == 0:
        raise ContractError("cannot simulate on an empty graph")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    w = np.zeros(graph.n)
    lap = graph.laplacian()
    for nodes in graph.components:
        if nodes.size < 2:
            continue
        sub = lap[np.ix_(nodes, nodes)]
        vals, vecs = np.linalg.eigh(sub)
        keep = vals > 1e-9
        z = rng.standard_normal(int(keep.sum()))
        w[nodes] = vecs[:, keep] @ (z / np.sqrt(tau * vals[keep]))
    return center_by_component(w, graph)


def lattice_edges(rows, cols):
    """4-neighbour lattice edge list over rows*cols nodes (row-major)."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return edges


def path_edges(n):
    """Path-graph edge list 0-1-2-...-(n-1)."""
    return [(i, i + 1) for i in range(n - 1)]


@dataclass(frozen=True)
class CovariateMatrix:
    """Design matrix with a leading intercept column of ones.

    Non-intercept columns are standardized to mean 0 / sd 1 unless built with
    ``standardize=False``; the means and scales used are stored so new data
    can be mapped onto the same scale at prediction time.  ``log_offset``, if
    present, is added to the count linear predictor without a coefficient.
    """

    values: np.ndarray  # (n, p), first column all ones
    names: tuple
    means: np.ndarray  # (p,), 0.0 for the intercept
    scales: np.ndarray  # (p,), 1.0 for the intercept
    log_offset: np.ndarray | None = None

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]


def build_covariates(raw, names, standardize=True, means=None, scales=None, log_offset=None):
    """Assemble a :class:`CovariateMatrix` from raw columns (no intercept).

    ``raw`` is (n, k); an intercept column is prepended.  With
    ``standardize=True`` each raw column is centered and scaled; a constant
    column cannot be standardized and is rejected with a "zero variance"
    error.  Passing ``means``/``scales`` (length k) reuses a previously
    stored standardization instead of recomputing it.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise ContractError("covariates must be a 2-d array")
    n, k = raw.shape
    names = tuple(names)
    if len(names) != k:
        raise ContractError(f"expected {k} covariate names, got {len(names)}")
    if np.any(~np.isfinite(raw)):
        bad = names[int(np.argwhere(~np.isfinite(raw))[0][1])]
        raise IngestionError(f"non-finite value in covariate column {bad!r}")

    if standardize and n > 0:
        if means is None:
            means = raw.mean(axis=0)
        else:
            means = np.asarray(means, dtype=float)
        if scales is None:
            scales = raw.std(axis=0, ddof=0)
        else:
            scales = np.asarray(scales, dtype=float)
        zero = scales < 1e-12
        if np.any(zero):
            bad = names[int(np.flatnonzero(zero)[0])]
            raise IngestionError(f"covariate column {bad!r} has zero variance and cannot be standardized")
        cols = (raw - means) / scales
    else:
        means = np.zeros(k)
        scales = np.ones(k)
        cols = raw

    values = np.column_stack([np.ones(n), cols]) if k else np.ones((n, 1))
    full_names = ("intercept",) + names
    full_means = np.concatenate([[0.0], np.asarray(means, dtype=float)])
    full_scales = np.concatenate([[1.0], np.asarray(scales, dtype=float)])
    if log_offset is not None:
        log_offset = np.asarray(log_offset, dtype=float)
        if log_offset.shape != (n,):
            raise ContractError("log_offset length does not match unit count")
    return CovariateMatrix(values, full_names, full_means, full_scales, log_offset)
