"""Weighted undirected graphs in CSR form and the structural operators built on them."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .numcore import GTXError


class GraphValidationError(GTXError, ValueError):
    pass


class RetryExhaustedError(GTXError, RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable symmetric weighted graph; ``laplacian`` is ``diag(A 1) - A``."""

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    weights: np.ndarray
    coords: np.ndarray | None = None

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, self.col_indices, self.row_offsets), shape=(self.n, self.n))

    @cached_property
    def degrees(self) -> np.ndarray:
        # fsum is exactly rounded, so degrees do not depend on node order
        w, ptr = self.weights.tolist(), self.row_offsets
        return np.array([math.fsum(w[ptr[i]:ptr[i + 1]]) for i in range(self.n)])

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        return (sp.diags(self.degrees) - self.adjacency).tocsr()

    @property
    def num_edges(self) -> int:
        return int(self.col_indices.size // 2)

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]

    def edges(self) -> np.ndarray:
        """Undirected edges ``(i, j, w)`` with ``i < j``, one row each."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.column_stack([coo.row[order], coo.col[order], coo.data[order]])


@dataclass(frozen=True)
class KHopMask:
    """Attention support: ``indices[indptr[i]:indptr[i+1]]`` lists node ``i``'s k-hop ball, self included."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def rows(self) -> list[np.ndarray]:
        return [self.indices[self.indptr[i]:self.indptr[i + 1]] for i in range(self.n)]

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def dense(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        m[np.repeat(np.arange(self.n), np.diff(self.indptr)), self.indices] = True
        return m

    @classmethod
    def full(cls, n: int) -> "KHopMask":
        return cls(n, np.arange(0, n * n + 1, n), np.tile(np.arange(n), n))


@dataclass(frozen=True)
class EdgeSet:
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self):
        return len(self.pairs)


# ---------------------------------------------------------------------------
# construction


def _from_csr(a: sp.spmatrix, n: int, coords=None) -> Graph:
    a = sp.csr_matrix(a, dtype=np.float64)
    a.setdiag(0.0)
    a.eliminate_zeros()
    a.sort_indices()
    if coords is not None:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape[0] != n:
            raise GraphValidationError(f"coords has {coords.shape[0]} rows for {n} nodes")
    return Graph(n, a.indptr.astype(np.int64), a.indices.astype(np.int64), a.data, coords)


def build_laplacian(adjacency, n: int | None = None, coords=None, tol: float = 1e-12) -> Graph:
    """Validate a symmetric weighted adjacency and build the graph.

    ``adjacency`` is a dense or sparse ``n x n`` matrix, or an iterable of
    ``(i, j, w)`` triples listing both directions of every edge.
    """
    if sp.issparse(adjacency) or (isinstance(adjacency, np.ndarray) and adjacency.ndim == 2
                                  and adjacency.shape[0] == adjacency.shape[1]
                                  and (n is None or adjacency.shape[0] == n)):
        a = sp.csr_matrix(adjacency, dtype=np.float64)
        n = a.shape[0] if n is None else n
    else:
        if n is None:
            raise GraphValidationError("n is required for an edge list")
        triples = np.asarray(list(adjacency), dtype=np.float64).reshape(-1, 3)
        i, j, w = triples[:, 0].astype(np.int64), triples[:, 1].astype(np.int64), triples[:, 2]
        if triples.size and (i.min() < 0 or j.min() < 0 or max(i.max(), j.max()) >= n):
            raise GraphValidationError(f"edge index out of range for n={n}")
        a = sp.coo_matrix((w, (i, j)), shape=(n, n)).tocsr()
    if a.nnz and a.data.min() < 0:
        bad = sp.coo_matrix(a)
        k = int(np.flatnonzero(bad.data < 0)[0])
        raise GraphValidationError(f"negative weight {bad.data[k]} on edge ({bad.row[k]}, {bad.col[k]})")
    diff = (a - a.T).tocoo()
    off = np.abs(diff.data) > tol
    if off.any():
        k = int(np.flatnonzero(off)[0])
        raise GraphValidationError(f"asymmetric adjacency: pair ({diff.row[k]}, {diff.col[k]}) has no matching reverse weight")
    return _from_csr(a, n, coords)


def from_undirected(edges, n: int, coords=None) -> Graph:
    """Graph from one-direction ``(i, j[, w])`` rows; weight defaults to 1."""
    e = np.asarray(edges, dtype=np.float64)
    if e.size == 0:
        return build_laplacian(sp.csr_matrix((n, n)), n, coords)
    if e.shape[1] == 2:
        e = np.column_stack([e, np.ones(len(e))])
    i, j, w = e[:, 0].astype(np.int64), e[:, 1].astype(np.int64), e[:, 2]
    a = sp.coo_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
    return build_laplacian(a, n, coords)


def kernel_bandwidth(n: int, intrinsic_dim: int, scale: float = 0.25) -> float:
    """Default kernel time ``scale * (log n / n) ** (2 / (d + 6))``."""
    return scale * (math.log(n) / n) ** (2.0 / (intrinsic_dim + 6))


def gaussian_kernel_weights(points: np.ndarray, epsilon: float) -> np.ndarray:
    """Density-normalised Gaussian kernel matrix, diagonal included."""
    sq = np.einsum("ij,ij->i", points, points)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * points @ points.T, 0.0)
    k = np.exp(-d2 / (4.0 * epsilon))
    deg = k.sum(axis=1)
    return k / np.outer(deg, deg)


def build_kernel_graph(points, epsilon: float) -> Graph:
    """Complete graph with weights ``k~(x, y) / epsilon``.

    ``k(x, y) = exp(-|x - y|^2 / (4 epsilon))`` is normalised by the kernel
    degrees, ``k~ = k / (d(x) d(y))``, so the Laplacian of the stored graph is
    ``(D~ - W~) / epsilon``.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if epsilon <= 0:
        raise GraphValidationError(f"epsilon must be positive, got {epsilon}")
    if pts.shape[0] < 2:
        raise GraphValidationError("need at least two points")
    w = gaussian_kernel_weights(pts, epsilon) / epsilon
    np.fill_diagonal(w, 0.0)
    n = pts.shape[0]
    indptr = np.arange(0, n * (n - 1) + 1, n - 1, dtype=np.int64)
    off = ~np.eye(n, dtype=bool)
    indices = np.broadcast_to(np.arange(n), (n, n))[off].astype(np.int64)
    return Graph(n, indptr, indices, w[off], pts)


def radius_graph(points, radius: float, weight: float = 1.0) -> Graph:
    """Connect every pair of points closer than ``radius`` (Euclidean)."""
    from scipy.spatial import cKDTree

    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    n = len(pts)
    if len(pairs) == 0:
        return from_undirected(np.zeros((0, 3)), n, pts)
    return from_undirected(np.column_stack([pairs, np.full(len(pairs), weight)]), n, pts)


# ---------------------------------------------------------------------------
# masks


def _union_pattern(g: Graph, extra: EdgeSet | None) -> sp.csr_matrix:
    a = g.adjacency.copy()
    a.data = np.ones_like(a.data)
    if extra is not None and len(extra):
        p = np.asarray(extra.pairs, dtype=np.int64)
        b = sp.coo_matrix((np.ones(2 * len(p)), (np.r_[p[:, 0], p[:, 1]], np.r_[p[:, 1], p[:, 0]])), shape=a.shape)
        a = (a + b.tocsr()).tocsr()
        a.data[:] = 1.0
    a.sort_indices()
    return a


def k_hop_mask(g: Graph, k: int, extra_edges: EdgeSet | None = None) -> KHopMask:
    """Nodes within ``k`` unweighted hops of each node, self included, sorted ascending."""
    if k < 1:
        raise GraphValidationError(f"k must be >= 1, got {k}")
    a = _union_pattern(g, extra_edges)
    indptr, indices = a.indptr, a.indices
    seen = np.zeros(g.n, dtype=bool)
    rows = []
    for i in range(g.n):
        ball = [np.array([i])]
        seen[i] = True
        frontier = np.array([i])
        for _ in range(k):
            if frontier.size == 0:
                break
            nbr = np.concatenate([indices[indptr[u]:indptr[u + 1]] for u in frontier])
            nbr = np.unique(nbr)
            nbr = nbr[~seen[nbr]]
            seen[nbr] = True
            ball.append(nbr)
            frontier = nbr
        row = np.sort(np.concatenate(ball))
        seen[row] = False
        rows.append(row)
    counts = np.fromiter((len(r) for r in rows), dtype=np.int64, count=g.n)
    out_ptr = np.concatenate([[0], np.cumsum(counts)])
    return KHopMask(g.n, out_ptr, np.concatenate(rows).astype(np.int64))


def hop_distances(g: Graph, source: int) -> np.ndarray:
    """Unweighted BFS distances from ``source``; unreachable nodes get -1."""
    dist = np.full(g.n, -1, dtype=np.int64)
    dist[source] = 0
    frontier = np.array([source])
    level = 0
    while frontier.size:
        level += 1
        nbr = np.unique(np.concatenate([g.neighbors(u) for u in frontier]))
        nbr = nbr[dist[nbr] < 0]
        dist[nbr] = level
        frontier = nbr
    return dist


def diameter(g: Graph) -> int:
    """Hop diameter; raises on disconnected graphs."""
    best = 0
    for s in range(g.n):
        d = hop_distances(g, s)
        if (d < 0).any():
            raise GraphValidationError("graph is disconnected")
        best = max(best, int(d.max()))
    return best


def is_connected(g: Graph) -> bool:
    return g.n == 0 or bool((hop_distances(g, 0) >= 0).all())


# ---------------------------------------------------------------------------
# random structure


def random_expander_edges(n: int, degree: int, seed, max_restarts: int = 100) -> EdgeSet:
    """Random ``degree``-regular simple graph by the configuration model with rejection."""
    if degree < 0 or degree >= n:
        raise GraphValidationError(f"need 0 <= degree < n, got degree={degree}, n={n}")
    if (n * degree) % 2:
        raise GraphValidationError(f"n * degree must be even, got {n} * {degree}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stubs = np.repeat(np.arange(n), degree)
    for _ in range(max_restarts + 1):
        perm = rng.permutation(stubs).reshape(-1, 2)
        lo, hi = perm.min(axis=1), perm.max(axis=1)
        if (lo == hi).any():
            continue
        key = lo * n + hi
        if np.unique(key).size != key.size:
            continue
        order = np.argsort(key)
        return EdgeSet(np.column_stack([lo[order], hi[order]]).astype(np.int64))
    raise RetryExhaustedError(f"no simple {degree}-regular graph on {n} nodes after {max_restarts} restarts")


def induced_subgraph(g: Graph, nodes, rescale: float = 1.0) -> Graph:
    nodes = np.asarray(nodes, dtype=np.int64)
    a = g.adjacency[nodes][:, nodes] * rescale
    coords = None if g.coords is None else g.coords[nodes]
    return _from_csr(a, len(nodes), coords)


def subsample_graph(g: Graph, fraction: float, seed, rescale: bool = False) -> tuple[Graph, np.ndarray]:
    """Induced subgraph on ``ceil(fraction * n)`` uniformly drawn nodes.

    Returns the subgraph and the sorted parent indices of the kept nodes.  With
    ``rescale`` the weights are multiplied by ``n / n_kept`` so that graphs whose
    weights scale like ``1/n`` keep their degree profile.
    """
    if not (0.0 < fraction <= 1.0):
        raise GraphValidationError(f"fraction must lie in (0, 1], got {fraction}")
    m = min(g.n, math.ceil(fraction * g.n - 1e-9))
    if m < 2:
        raise GraphValidationError(f"fraction {fraction} of {g.n} nodes keeps fewer than 2")
    if m == g.n:
        return g, np.arange(g.n)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kept = np.sort(rng.choice(g.n, size=m, replace=False))
    return induced_subgraph(g, kept, g.n / m if rescale else 1.0), kept


# ---------------------------------------------------------------------------
# plain-text edge list


def save_edgelist(g: Graph, path) -> None:
    """Header ``n m``, then ``i j w`` per undirected edge, then optional ``coords dim`` block."""
    e = g.edges()
    lines = [f"{g.n} {len(e)}"]
    lines += [f"{int(i)} {int(j)} {float(w)!r}" for i, j, w in e]
    if g.coords is not None:
        lines.append(f"coords {g.coords.shape[1]}")
        lines += [" ".join(repr(float(v)) for v in row) for row in g.coords]
    Path(path).write_text("\n".join(lines) + "\n")


def load_edgelist(path) -> Graph:
    lines = Path(path).read_text().splitlines()
    try:
        n, m = (int(t) for t in lines[0].split())
        edges = [(int(a), int(b), float(c)) for a, b, c in (ln.split() for ln in lines[1:1 + m])]
        if len(edges) != m:
            raise ValueError(f"header promises {m} edges, found {len(edges)}")
    except (ValueError, IndexError) as exc:
        raise GraphValidationError(f"{path}: malformed edge list ({exc})") from None
    coords = None
    rest = [ln for ln in lines[1 + m:] if ln.strip()]
    if rest:
        head = rest[0].split()
        if head[0] != "coords" or len(rest) - 1 != n:
            raise GraphValidationError(f"{path}: malformed coordinate block")
        coords = np.array([[float(t) for t in ln.split()] for ln in rest[1:]])
        if coords.shape[1] != int(head[1]):
            raise GraphValidationError(f"{path}: coordinate rows do not match dim {head[1]}")
    return from_undirected(np.array(edges).reshape(-1, 3), n, coords)
