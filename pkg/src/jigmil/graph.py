"""Per-slide spatial graphs: normalized centroids, mutual-or kNN edges,
Gaussian edge weights, and grid-bin labels for the location task."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, InternalError

# Exact all-pairs search below this size; a KD-tree prunes candidates above.
BRUTE_FORCE_LIMIT = 2000

SIGMA_RULES = ("main", "appendix")


@dataclass
class MessagePlan:
    """Directed message-passing structure: both orientations of every edge
    plus a self-loop per node, sorted by (target, source), with CSR row
    pointers and the matching transpose layout."""

    n: int
    tgt: np.ndarray
    src: np.ndarray
    weights: np.ndarray
    indptr: np.ndarray
    perm_t: np.ndarray
    indices_t: np.ndarray
    indptr_t: np.ndarray
    _csr: object = field(default=None, repr=False, compare=False)
    _csr_t: object = field(default=None, repr=False, compare=False)

    def csr_pair(self):
        """Cached CSR matrices for the edge structure and its transpose.

        Callers swap in per-pass coefficient data before each product; a
        plan therefore belongs to one slide and must not be shared across
        threads mid-pass (slides are independent, matching the intended
        one-slide-per-thread concurrency).
        """
        if self._csr is None:
            from scipy.sparse import csr_matrix

            zeros = np.zeros(self.tgt.size)
            self._csr = csr_matrix(
                (zeros, self.src, self.indptr), shape=(self.n, self.n)
            )
            self._csr_t = csr_matrix(
                (zeros.copy(), self.indices_t, self.indptr_t),
                shape=(self.n, self.n),
            )
        return self._csr, self._csr_t


@dataclass
class SlideGraph:
    """kNN edge list over patch centroids with Gaussian edge weights.

    ``edges`` is an (E,2) int64 array of undirected pairs with j < l, sorted
    lexicographically; ``edge_weights`` aligns with it. ``bin_labels`` holds
    each patch's grid cell in [0, grid**2).
    """

    n: int
    edges: np.ndarray
    edge_weights: np.ndarray
    sigma: float
    degenerate_sigma: bool
    bin_labels: np.ndarray
    grid: int
    _plan: MessagePlan = field(default=None, repr=False, compare=False)

    def message_plan(self):
        if self._plan is None:
            loops = np.arange(self.n, dtype=np.int64)
            tgt = np.concatenate([self.edges[:, 0], self.edges[:, 1], loops])
            src = np.concatenate([self.edges[:, 1], self.edges[:, 0], loops])
            w = np.concatenate(
                [self.edge_weights, self.edge_weights, np.ones(self.n)]
            )
            order = np.lexsort((src, tgt))
            tgt, src, w = tgt[order], src[order], w[order]
            rows = np.arange(self.n + 1)
            perm_t = np.lexsort((tgt, src))
            self._plan = MessagePlan(
                n=self.n,
                tgt=tgt,
                src=src,
                weights=w,
                indptr=np.searchsorted(tgt, rows),
                perm_t=perm_t,
                indices_t=tgt[perm_t],
                indptr_t=np.searchsorted(src[perm_t], rows),
            )
        return self._plan

    def directed_message_edges(self):
        """(targets, sources, weights) over both edge orientations plus a
        self-loop per node with weight 1, sorted by (target, source)."""
        plan = self.message_plan()
        return plan.tgt, plan.src, plan.weights

    def degrees(self):
        """Undirected degree per node (self-loops not counted)."""
        return np.bincount(self.edges.ravel(), minlength=self.n)


def normalize_centroids(raw):
    """Min-max scale each axis into [0,1]; a constant axis maps to 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != 2 or raw.shape[0] < 1:
        raise DataError(f"centroids must be (N,2) with N >= 1, got {raw.shape}")
    bad = np.flatnonzero(~np.isfinite(raw).all(axis=1))
    if bad.size:
        raise DataError(f"non-finite centroid at row {bad[0]}")
    lo = raw.min(axis=0)
    hi = raw.max(axis=0)
    span = hi - lo
    out = np.empty_like(raw)
    for axis in range(2):
        if span[axis] == 0.0:
            out[:, axis] = 0.5
        else:
            out[:, axis] = (raw[:, axis] - lo[axis]) / span[axis]
    return out


def _dedupe_undirected(rows, cols):
    if rows.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    lo = np.minimum(rows, cols)
    hi = np.maximum(rows, cols)
    n = int(max(lo.max(), hi.max())) + 1
    codes = np.unique(lo.astype(np.int64) * n + hi)
    return np.column_stack([codes // n, codes % n])


def _knn_brute(centroids, kk):
    d2 = np.sum((centroids[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    # stable argsort breaks distance ties by lower node index
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :kk]


def _knn_tree(centroids, kk):
    from scipy.spatial import cKDTree

    n = centroids.shape[0]
    tree = cKDTree(centroids)
    m = min(kk + 2, n)
    while True:
        _, idx = tree.query(centroids, k=m)
        # exact squared distances, same formula as the brute-force path
        diff = centroids[idx] - centroids[:, None, :]
        d2 = np.sum(diff * diff, axis=2)
        d2[idx == np.arange(n)[:, None]] = np.inf
        # order candidates per row by (d2, index) to match the brute tie rule
        order = np.lexsort((idx, d2))
        ranked_idx = np.take_along_axis(idx, order, axis=1)
        ranked_d2 = np.take_along_axis(d2, order, axis=1)
        # boundary is safe once each row saw a candidate strictly farther
        # than its kk-th pick (otherwise unseen ties may exist)
        if m >= n or np.all(ranked_d2[:, m - 1] > ranked_d2[:, kk - 1]):
            return ranked_idx[:, :kk]
        m = min(2 * m, n)


def knn_edges(centroids, k):
    """Undirected mutual-or kNN edge list under Euclidean distance.

    (j,l) is an edge iff l is among the k nearest of j or vice versa; a
    node's own index never counts; effective k is min(k, N-1). Exact
    distance ties are broken by lower node index.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    centroids = np.asarray(centroids, dtype=np.float64)
    n = centroids.shape[0]
    if n == 1:
        return np.empty((0, 2), dtype=np.int64)
    kk = min(k, n - 1)
    if n <= BRUTE_FORCE_LIMIT:
        nbrs = _knn_brute(centroids, kk)
    else:
        nbrs = _knn_tree(centroids, kk)
    rows = np.repeat(np.arange(n, dtype=np.int64), kk)
    return _dedupe_undirected(rows, nbrs.ravel())


def _edge_sq_dists(centroids, edges):
    diff = centroids[edges[:, 0]] - centroids[edges[:, 1]]
    return np.sum(diff * diff, axis=1)


def edge_weights(centroids, edges, sigma_rule="main"):
    """Gaussian kernel weights exp(-d^2/sigma^2) and the bandwidth sigma.

    ``main`` sets sigma to the maximum edge distance in the graph;
    ``appendix`` sets sigma^2 to the maximum nearest-neighbor distance.
    Returns (weights, sigma, degenerate) where degenerate flags the all
    zero-length case (sigma forced to 1, all weights 1).
    """
    if sigma_rule not in SIGMA_RULES:
        raise ConfigError(f"sigma_rule must be one of {SIGMA_RULES}")
    if edges.shape[0] == 0:
        return np.empty(0), 1.0, False
    d2 = _edge_sq_dists(np.asarray(centroids, dtype=np.float64), edges)
    if sigma_rule == "main":
        sigma_sq = d2.max()
    else:
        # nearest-neighbor distance per node, from its incident edges
        d = np.sqrt(d2)
        nn = np.full(int(edges.max()) + 1, np.inf)
        np.minimum.at(nn, edges[:, 0], d)
        np.minimum.at(nn, edges[:, 1], d)
        sigma_sq = nn[np.isfinite(nn)].max()
    if sigma_sq == 0.0:
        return np.ones(edges.shape[0]), 1.0, True
    sigma = float(np.sqrt(sigma_sq))
    return np.exp(-d2 / (sigma * sigma)), sigma, False


def build_slide_graph(bag, k, grid, sigma_rule="main"):
    """Normalize centroids, build kNN edges, weight them, assign grid bins."""
    from .jigsaw import assign_bins

    coords = normalize_centroids(bag.centroids)
    edges = knn_edges(coords, k)
    weights, sigma, degenerate = edge_weights(coords, edges, sigma_rule)
    bins = assign_bins(coords, grid)
    g = SlideGraph(
        n=coords.shape[0],
        edges=edges,
        edge_weights=weights,
        sigma=sigma,
        degenerate_sigma=degenerate,
        bin_labels=bins,
        grid=grid,
    )
    _validate_graph(g, k)
    return g


def _validate_graph(g, k):
    if g.edges.size:
        if np.any(g.edges[:, 0] >= g.edges[:, 1]):
            raise InternalError("edge list contains self-loops or unordered pairs")
        if g.n > 1 and g.degrees().min() < min(k, g.n - 1):
            raise InternalError("node degree below min(k, N-1)")
        if np.any(g.edge_weights <= 0) or np.any(g.edge_weights > 1):
            raise InternalError("edge weight outside (0, 1]")
    if np.any(g.bin_labels < 0) or np.any(g.bin_labels >= g.grid * g.grid):
        raise InternalError("bin label out of range")


def graph_stats(slide_id, g):
    """One stats row for the graph CLI: sizes, degree range, sigma."""
    degrees = g.degrees()
    return {
        "slide_id": slide_id,
        "n_patches": g.n,
        "n_edges": int(g.edges.shape[0]),
        "min_degree": int(degrees.min()) if g.n else 0,
        "max_degree": int(degrees.max()) if g.n else 0,
        "sigma": g.sigma,
        "degenerate_sigma": int(g.degenerate_sigma),
    }
