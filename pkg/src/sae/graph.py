"""Areal adjacency graphs and the CAR precision matrix ``Q(rho) = D - rho W``."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.linalg import lapack
from scipy.sparse.csgraph import connected_components, reverse_cuthill_mckee

from .exceptions import (
    DisconnectedGraphError,
    DuplicateEdgeError,
    GraphError,
    IsolatedRegionError,
    RhoOutOfRangeError,
    SelfLoopError,
    WeightedAdjacencyError,
)

logger = logging.getLogger(__name__)


class RegionGraph:
    """Validated undirected areal graph with binary adjacency.

    Parameters
    ----------
    region_ids : sequence of str
        Unique labels; position in the sequence is the dense region index.
    edges : array-like of shape (n_edges, 2)
        Unordered index pairs. Stored canonically with ``i < j`` and sorted.
    validate : bool
        Reject isolated regions and disconnected graphs.
    """

    def __init__(self, region_ids, edges, validate=True):
        self.region_ids = tuple(str(r) for r in region_ids)
        if len(set(self.region_ids)) != len(self.region_ids):
            raise GraphError("region ids must be unique")
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if np.any(edges[:, 0] == edges[:, 1]):
            raise SelfLoopError("self-loop in edge set")
        if edges.size and (edges.min() < 0 or edges.max() >= len(self.region_ids)):
            raise GraphError("edge index out of range")
        edges = np.sort(edges, axis=1)
        edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
        if len(edges) > 1 and np.any(np.all(np.diff(edges, axis=0) == 0, axis=1)):
            raise DuplicateEdgeError("duplicate edge in edge set")
        self.edges = edges
        self.edges.setflags(write=False)
        if validate:
            self._validate()

    def _validate(self):
        if self.n_regions == 0:
            raise GraphError("graph has no regions")
        isolated = np.flatnonzero(self.degrees == 0)
        if isolated.size:
            ids = [self.region_ids[i] for i in isolated[:10]]
            raise IsolatedRegionError(f"isolated regions: {ids}")
        n_comp, _ = components(self.n_regions, self.edges)
        if n_comp > 1:
            raise DisconnectedGraphError(f"graph has {n_comp} connected components")

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        n = self.n_regions
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        W = sp.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(n, n))
        W.sort_indices()
        return W

    @cached_property
    def degrees(self) -> np.ndarray:
        d = np.bincount(self.edges.ravel(), minlength=self.n_regions).astype(np.int64)
        d.setflags(write=False)
        return d

    @cached_property
    def content_hash(self) -> str:
        """SHA-256 of the canonical edge-list text (ids, their order, edges)."""
        return hashlib.sha256(self.to_edge_list().encode("utf-8")).hexdigest()

    @cached_property
    def _ordering(self):
        perm = reverse_cuthill_mckee(self.adjacency, symmetric_mode=True).astype(np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        pi, pj = inv[self.edges[:, 0]], inv[self.edges[:, 1]]
        lo, hi = np.minimum(pi, pj), np.maximum(pi, pj)
        bandwidth = int((hi - lo).max()) if len(lo) else 0
        return perm, inv, bandwidth, hi - lo, lo

    @cached_property
    def _permuted_adjacency(self) -> np.ndarray:
        """Dense ``W`` in the fill-reducing ordering (read-only)."""
        perm = self._ordering[0]
        Wp = self.adjacency[perm][:, perm].toarray()
        Wp.setflags(write=False)
        return Wp

    @property
    def bandwidth(self) -> int:
        """Half-bandwidth of the adjacency under the fill-reducing ordering."""
        return self._ordering[2]

    def index_of(self, region_id: str) -> int:
        return self._index[region_id]

    @cached_property
    def _index(self):
        return {r: i for i, r in enumerate(self.region_ids)}

    def to_edge_list(self) -> str:
        """Serialize as declaration lines (one id each) followed by edge lines."""
        lines = list(self.region_ids)
        lines += [f"{self.region_ids[i]} {self.region_ids[j]}" for i, j in self.edges]
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        if not isinstance(other, RegionGraph):
            return NotImplemented
        return self.region_ids == other.region_ids and np.array_equal(self.edges, other.edges)

    def __hash__(self):
        return hash(self.content_hash)

    def __repr__(self):
        return f"RegionGraph(n_regions={self.n_regions}, n_edges={self.n_edges})"


def components(n_regions: int, edges) -> tuple[int, np.ndarray]:
    """Label connected components of an undirected edge set.

    Returns ``(n_components, labels)``; isolated regions form singleton
    components.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    A = sp.coo_matrix(
        (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n_regions, n_regions)
    )
    n_comp, labels = connected_components(A, directed=False)
    return int(n_comp), labels


def parse_edge_list(text: str) -> tuple[list[str], np.ndarray]:
    """Parse edge-list text into ``(region_ids, edges)`` without graph-level checks.

    A line holding a single id declares a region without adding an edge.
    Lines with more than two tokens are rejected (weights are unsupported).
    """
    ids: dict[str, int] = {}
    edges = []
    seen = set()

    def idx(token):
        if token not in ids:
            ids[token] = len(ids)
        return ids[token]

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) == 1:
            idx(tokens[0])
            continue
        if len(tokens) > 2:
            raise WeightedAdjacencyError(
                f"line {lineno}: expected 'idA idB', got {len(tokens)} fields"
            )
        a, b = tokens
        if a == b:
            raise SelfLoopError(f"line {lineno}: self-loop on {a!r}")
        i, j = idx(a), idx(b)
        key = (min(i, j), max(i, j))
        if key in seen:
            raise DuplicateEdgeError(f"line {lineno}: duplicate edge {a!r}-{b!r}")
        seen.add(key)
        edges.append(key)
    return list(ids), np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def load_edge_list(text: str, allow_components: bool = False) -> RegionGraph:
    """Build a validated :class:`RegionGraph` from edge-list text.

    With ``allow_components`` the largest connected component is kept and
    the dropped region ids are logged; otherwise more than one component is
    an error.
    """
    ids, edges = parse_edge_list(text)
    if allow_components and ids:
        n_comp, labels = components(len(ids), edges)
        if n_comp > 1:
            keep_label = np.bincount(labels).argmax()
            keep = labels == keep_label
            dropped = [r for r, k in zip(ids, keep) if not k]
            logger.warning("dropping %d regions outside the largest component: %s",
                           len(dropped), dropped)
            remap = np.full(len(ids), -1)
            remap[keep] = np.arange(keep.sum())
            edges = remap[edges]
            edges = edges[(edges >= 0).all(axis=1)]
            ids = [r for r, k in zip(ids, keep) if k]
    return RegionGraph(ids, edges)


def read_edge_list(path, allow_components: bool = False) -> RegionGraph:
    with open(path, encoding="utf-8") as fh:
        return load_edge_list(fh.read(), allow_components=allow_components)


def write_edge_list(graph: RegionGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(graph.to_edge_list())


def graph_report(text: str) -> dict:
    """Summary used by ``sae graph check``; reports rather than rejects components."""
    ids, edges = parse_edge_list(text)
    n = len(ids)
    degrees = np.bincount(edges.ravel(), minlength=n) if n else np.zeros(0, int)
    n_comp, labels = components(n, edges) if n else (0, np.zeros(0, int))
    sizes = np.bincount(labels) if n else np.zeros(0, int)
    order = np.argsort(-sizes, kind="stable")
    return {
        "n_regions": n,
        "n_edges": int(len(edges)),
        "degree_histogram": {str(k): v for k, v in sorted(Counter(degrees.tolist()).items())},
        "isolated_regions": [ids[i] for i in np.flatnonzero(degrees == 0)],
        "n_components": n_comp,
        "component_sizes": [int(sizes[c]) for c in order],
        "components": [[ids[i] for i in np.flatnonzero(labels == c)] for c in order[1:]],
        "connected": n_comp == 1,
    }


def lattice_graph(n_rows: int, n_cols: int) -> RegionGraph:
    """Rook-contiguity lattice with ids ``r{row}c{col}`` in row-major order."""
    ids = [f"r{r}c{c}" for r in range(n_rows) for c in range(n_cols)]
    edges = []
    for r in range(n_rows):
        for c in range(n_cols):
            k = r * n_cols + c
            if c + 1 < n_cols:
                edges.append((k, k + 1))
            if r + 1 < n_rows:
                edges.append((k, k + n_cols))
    return RegionGraph(ids, edges)


def check_rho(rho) -> float:
    rho = float(rho)
    if not (0.0 <= rho < 1.0) or not np.isfinite(rho):
        raise RhoOutOfRangeError(f"rho must lie in [0, 1), got {rho}")
    return rho


class CarPrecision:
    """Sparse CAR precision ``Q = D - rho W`` with a banded Cholesky factor.

    The factor is computed in the graph's reverse Cuthill-McKee ordering, which
    depends only on the sparsity pattern and is therefore shared by every rho.
    """

    def __init__(self, graph: RegionGraph, rho: float):
        self.graph = graph
        self.rho = check_rho(rho)

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        g = self.graph
        Q = sp.diags(g.degrees.astype(float)) - self.rho * g.adjacency
        return sp.csr_matrix(Q)

    @cached_property
    def cholesky(self) -> np.ndarray:
        """Lower banded factor of the permuted precision, LAPACK storage ``(b+1, N)``."""
        g = self.graph
        perm, _, b, offset, col = g._ordering
        ab = np.zeros((b + 1, g.n_regions))
        ab[0] = g.degrees[perm]
        ab[offset, col] = -self.rho
        return scipy.linalg.cholesky_banded(ab, lower=True)

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.log(self.cholesky[0]).sum())

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """``Q x`` without assembling ``Q``."""
        x = np.asarray(x, dtype=float)
        d = self.graph.degrees.reshape((-1,) + (1,) * (x.ndim - 1))
        return d * x - self.rho * (self.graph.adjacency @ x)

    def quad(self, x: np.ndarray) -> float:
        """``x' Q x`` for a vector ``x``."""
        return float(x @ self.matvec(x))

    def solve(self, y: np.ndarray) -> np.ndarray:
        """``Q^{-1} y`` for a vector or an ``N x m`` matrix."""
        perm = self.graph._ordering[0]
        xp = scipy.linalg.cho_solve_banded((self.cholesky, True), y[perm])
        x = np.empty_like(xp)
        x[perm] = xp
        return x

    def whiten_inverse(self, e: np.ndarray) -> np.ndarray:
        """Map standard normals ``e`` (N or N x m) to draws with covariance ``Q^{-1}``.

        Solves ``L' x = e`` with the banded factor, then undoes the ordering.
        """
        perm = self.graph._ordering[0]
        e2 = e.reshape(len(perm), -1)
        xp, info = lapack.dtbtrs(self.cholesky, e2, uplo="L", trans="T")
        if info != 0:
            raise np.linalg.LinAlgError(f"dtbtrs failed with info={info}")
        x = np.empty_like(xp)
        x[perm] = xp
        return x.reshape(e.shape)

    def trace_inv_w(self) -> float:
        """``tr(Q^{-1} W)``, the negated rho-derivative of ``log det Q``.

        Computed by solving against the columns of ``W``.
        """
        Z = scipy.linalg.cho_solve_banded((self.cholesky, True), self.graph._permuted_adjacency)
        return float(np.trace(Z))

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def car_precision(graph: RegionGraph, rho: float) -> CarPrecision:
    """Return the CAR precision ``D - rho W`` for ``rho`` in ``[0, 1)``."""
    return CarPrecision(graph, rho)
