"""Graph container, BFS ordering, banded adjacency encoding and dataset augmentation."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "BandwidthExceeded",
    "BandedAdjacency",
    "DatasetSpec",
    "FeatureStats",
    "bfs_order",
    "max_span",
    "encode_banded",
    "decode_banded",
    "estimate_bandwidth",
    "sample_subgraph",
    "build_dataset",
    "standardize_features",
    "destandardize_features",
    "impute_missing_features",
    "missing_mask",
    "largest_component",
    "element_rng",
]


class GraphError(ValueError):
    """Invalid graph data or a violated graph precondition."""


class BandwidthExceeded(GraphError):
    def __init__(self, span: int, m: int):
        super().__init__(f"bandwidth exceeded: edge spans {span} positions, m={m}")
        self.span = span
        self.m = m


def _canonical_edges(edges, n: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if (arr < 0).any() or (arr >= n).any():
        raise GraphError("edge endpoint out of range")
    if (arr[:, 0] == arr[:, 1]).any():
        raise GraphError("self-loop in edge list")
    arr = np.sort(arr, axis=1)
    arr = np.unique(arr, axis=0)
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with a dense ``(n, d)`` node feature matrix.

    The first ``k`` feature columns are spatial coordinates. Edges are stored
    as a lexicographically sorted ``(e, 2)`` array with ``i < j`` on each row.
    """

    node_features: np.ndarray
    edges: np.ndarray
    feature_names: tuple[str, ...] = ()
    k: int = 2
    _adj: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        x = np.asarray(self.node_features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise GraphError("node_features must be a 2-D array")
        object.__setattr__(self, "node_features", x)
        object.__setattr__(self, "edges", _canonical_edges(self.edges, x.shape[0]))
        names = tuple(self.feature_names)
        if not names:
            names = tuple(_default_names(x.shape[1]))
        if len(names) != x.shape[1]:
            raise GraphError(f"{len(names)} feature names for {x.shape[1]} features")
        object.__setattr__(self, "feature_names", names)
        if not 0 <= self.k <= x.shape[1]:
            raise GraphError(f"k={self.k} spatial columns but d={x.shape[1]}")

    @property
    def n(self) -> int:
        return self.node_features.shape[0]

    @property
    def d(self) -> int:
        return self.node_features.shape[1]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @classmethod
    def from_edges(cls, n: int, edges, d: int = 2, k: int | None = None) -> "Graph":
        """Topology-only graph with zero-filled features."""
        return cls(np.zeros((n, d)), edges, k=min(d, 2) if k is None else k)

    def adjacency(self) -> list[list[int]]:
        """Sorted neighbor lists (cached)."""
        if self._adj is None:
            adj: list[list[int]] = [[] for _ in range(self.n)]
            for i, j in self.edges.tolist():
                adj[i].append(j)
                adj[j].append(i)
            for nb in adj:
                nb.sort()
            object.__setattr__(self, "_adj", adj)
        return self._adj

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def components(self) -> list[list[int]]:
        adj = self.adjacency()
        seen = np.zeros(self.n, dtype=bool)
        comps = []
        for s in range(self.n):
            if seen[s]:
                continue
            seen[s] = True
            comp, queue = [s], deque([s])
            while queue:
                u = queue.popleft()
                for v in adj[u]:
                    if not seen[v]:
                        seen[v] = True
                        comp.append(v)
                        queue.append(v)
            comps.append(sorted(comp))
        return comps

    def is_connected(self) -> bool:
        return self.n >= 1 and len(self.components()) == 1

    def with_features(self, features: np.ndarray, feature_names=None, k=None) -> "Graph":
        return Graph(
            features,
            self.edges,
            self.feature_names if feature_names is None else feature_names,
            self.k if k is None else k,
        )

    def induced(self, nodes: Sequence[int]) -> "Graph":
        """Subgraph induced by ``nodes``; node ``nodes[p]`` becomes index ``p``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        index = np.full(self.n, -1, dtype=np.int64)
        index[nodes] = np.arange(len(nodes))
        e = index[self.edges]
        keep = (e >= 0).all(axis=1)
        return Graph(self.node_features[nodes], e[keep], self.feature_names, self.k)

    def relabel(self, perm: np.ndarray) -> "Graph":
        """Graph with node ``v`` moved to position ``perm[v]``."""
        perm = np.asarray(perm, dtype=np.int64)
        x = np.empty_like(self.node_features)
        x[perm] = self.node_features
        return Graph(x, perm[self.edges], self.feature_names, self.k)

    def same_as(self, other: "Graph") -> bool:
        return (
            self.node_features.shape == other.node_features.shape
            and np.array_equal(self.node_features, other.node_features)
            and np.array_equal(self.edges, other.edges)
            and self.feature_names == other.feature_names
            and self.k == other.k
        )

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, e={self.n_edges}, d={self.d}, k={self.k})"


def _default_names(d: int) -> list[str]:
    base = ["x", "y", "z"]
    return [base[i] if i < 3 else f"f{i}" for i in range(d)]


def largest_component(graph: Graph) -> Graph:
    comps = graph.components()
    if len(comps) <= 1:
        return graph
    best = max(comps, key=len)
    return graph.induced(best)


def element_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for element ``index`` of a seeded collection."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])


# ----------------------------------------------------------------------------------------
# BFS ordering and banded encoding
# ----------------------------------------------------------------------------------------


def _bfs_sequence(adj: list[list[int]], labels: np.ndarray, limit: int | None = None) -> list[int]:
    """BFS visit sequence over original node indices.

    ``labels`` is the random relabeling; the walk starts at the node labelled 0
    and appends unvisited neighbors in ascending label order.
    """
    n = len(adj)
    limit = n if limit is None else limit
    start = int(np.argmin(labels))
    seq = [start]
    seen = np.zeros(n, dtype=bool)
    seen[start] = True
    head = 0
    while len(seq) < limit and head < len(seq):
        u = seq[head]
        head += 1
        fresh = [v for v in adj[u] if not seen[v]]
        if fresh:
            fresh.sort(key=labels.__getitem__)
            for v in fresh:
                seen[v] = True
            seq.extend(fresh)
    return seq[:limit]


def bfs_order(graph: Graph, rng: np.random.Generator, labels: np.ndarray | None = None) -> np.ndarray:
    """Random BFS ordering; ``perm[v]`` is the BFS position of original node ``v``.

    ``labels`` overrides the uniform random relabeling (used in tests).
    """
    n = graph.n
    if n < 1:
        raise GraphError("empty graph")
    if labels is None:
        labels = rng.permutation(n)
    seq = _bfs_sequence(graph.adjacency(), np.asarray(labels))
    if len(seq) != n:
        raise GraphError("graph not connected")
    perm = np.empty(n, dtype=np.int64)
    perm[np.asarray(seq)] = np.arange(n)
    return perm


def max_span(graph: Graph, perm: np.ndarray) -> int:
    """Largest |perm[i] - perm[j]| over edges (0 for edgeless graphs)."""
    if graph.n_edges == 0:
        return 0
    p = np.asarray(perm)[graph.edges]
    return int(np.abs(p[:, 0] - p[:, 1]).max())


@dataclass(frozen=True, eq=False)
class BandedAdjacency:
    """``(n-1, m)`` binary matrix; ``rows[i, j] = 1`` iff nodes ``i+1`` and ``i-j`` are adjacent."""

    rows: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.uint8).reshape(max(self.n - 1, 0), self.m)
        object.__setattr__(self, "rows", rows)
        if self.n < 1 or self.m < 1:
            raise GraphError("banded adjacency needs n >= 1 and m >= 1")


def encode_banded(graph: Graph, perm: np.ndarray, m: int) -> BandedAdjacency:
    n = graph.n
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(n)):
        raise GraphError("ordering is not a permutation")
    rows = np.zeros((max(n - 1, 0), m), dtype=np.uint8)
    if graph.n_edges:
        p = perm[graph.edges]
        lo, hi = p.min(axis=1), p.max(axis=1)
        span = hi - lo
        if span.max() > m:
            raise BandwidthExceeded(int(span.max()), m)
        rows[hi - 1, span - 1] = 1
    return BandedAdjacency(rows, n, m)


def decode_banded(banded: BandedAdjacency, d: int = 2) -> Graph:
    rows = banded.rows
    i, j = np.nonzero(rows)
    hi = i + 1
    lo = i - j
    keep = lo >= 0
    edges = np.stack([lo[keep], hi[keep]], axis=1)
    return Graph.from_edges(banded.n, edges, d=d)


# ----------------------------------------------------------------------------------------
# Data augmentation
# ----------------------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    n_graphs: int
    node_count_mean: float
    node_count_std: float
    seed: int = 0

    def __post_init__(self):
        if self.n_graphs < 1:
            raise ValueError("n_graphs must be >= 1")
        if not self.node_count_mean > self.node_count_std >= 0:
            raise ValueError("need node_count_mean > node_count_std >= 0")

    @property
    def n_max(self) -> int:
        """Default generation cap, mean + 6 std."""
        return int(math.ceil(self.node_count_mean + 6 * self.node_count_std))

    @property
    def topology_epochs(self) -> int:
        return int(math.ceil(5 * (self.node_count_mean + 3 * self.node_count_std)))


def sample_subgraph(main_graph: Graph, n: int, rng: np.random.Generator) -> Graph:
    """First ``n`` nodes of a random BFS of ``main_graph``, spatial columns centered."""
    if n > main_graph.n:
        raise GraphError(f"subgraph size {n} exceeds main graph size {main_graph.n}")
    if n < 1:
        raise GraphError("subgraph size must be positive")
    labels = rng.permutation(main_graph.n)
    seq = _bfs_sequence(main_graph.adjacency(), labels, limit=n)
    if len(seq) < n:
        raise GraphError("graph not connected")
    sub = main_graph.induced(seq)
    x = sub.node_features.copy()
    k = sub.k
    x[:, :k] -= x[:, :k].mean(axis=0)
    return sub.with_features(x)


def _draw_node_count(spec: DatasetSpec, rng: np.random.Generator, upper: int) -> int:
    n = int(np.rint(rng.normal(spec.node_count_mean, spec.node_count_std)))
    return min(max(n, 2), upper)


def build_dataset(main_graph: Graph, spec: DatasetSpec) -> list[Graph]:
    """``spec.n_graphs`` centered BFS subgraphs with normally distributed sizes."""
    out = []
    for idx in range(spec.n_graphs):
        rng = element_rng(spec.seed, idx)
        n = _draw_node_count(spec, rng, main_graph.n)
        out.append(sample_subgraph(main_graph, n, rng))
    return out


def estimate_bandwidth(
    main_graph: Graph,
    spec: DatasetSpec,
    trials: int = 100_000,
    percentile: float = 99.9,
    return_spans: bool = False,
):
    """Percentile of the maximal BFS edge span over randomly sampled subgraphs.

    Each trial draws a subgraph size, a subgraph and an independent BFS
    ordering of that subgraph.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 < percentile <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    rng = np.random.default_rng([int(spec.seed) & 0xFFFFFFFFFFFFFFFF, 0xBA2D])
    spans = np.empty(trials, dtype=np.int64)
    for t in range(trials):
        n = _draw_node_count(spec, rng, main_graph.n)
        sub = sample_subgraph(main_graph, n, rng)
        spans[t] = max_span(sub, bfs_order(sub, rng))
    m = max(1, int(math.ceil(np.percentile(spans, percentile))))
    if return_spans:
        return m, spans
    return m


# ----------------------------------------------------------------------------------------
# Feature preprocessing
# ----------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if (self.std <= 0).any():
            raise ValueError("feature std must be strictly positive")

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, s: np.ndarray) -> np.ndarray:
        return self.mean + self.std * s


def standardize_features(
    dataset: Sequence[Graph], std_floor: float | None = None
) -> tuple[list[Graph], FeatureStats]:
    """Pooled z-scoring of every feature over all nodes of all graphs.

    Without ``std_floor`` a zero-variance feature is an error; with it the
    standard deviation is clamped from below.
    """
    if not dataset:
        raise ValueError("empty dataset")
    pooled = np.concatenate([g.node_features for g in dataset], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    names = dataset[0].feature_names
    if std_floor is None:
        for name, s in zip(names, std):
            if not s > 0:
                raise ValueError(f"feature {name!r} has zero variance")
    else:
        std = np.maximum(std, std_floor)
    stats = FeatureStats(mean, std, names)
    return [g.with_features(stats.forward(g.node_features)) for g in dataset], stats


def destandardize_features(dataset: Sequence[Graph], stats: FeatureStats) -> list[Graph]:
    return [g.with_features(stats.inverse(g.node_features)) for g in dataset]


def missing_mask(graph: Graph, columns: Sequence[int | str], zero_is_missing: bool = True) -> np.ndarray:
    """Boolean ``(n, d)`` mask of NaN (and optionally zero) entries in ``columns``."""
    mask = np.zeros(graph.node_features.shape, dtype=bool)
    for c in columns:
        j = graph.feature_names.index(c) if isinstance(c, str) else int(c)
        col = graph.node_features[:, j]
        mask[:, j] = np.isnan(col)
        if zero_is_missing:
            mask[:, j] |= col == 0
    return mask


def impute_missing_features(
    graph: Graph, missing: np.ndarray, tol: float = 1e-9, max_iter: int = 1_000_000
) -> Graph:
    """Replace masked entries by the mean of their graph neighbors.

    Missing values are first seeded by propagating neighbor means outward from
    known nodes, then refined by Jacobi sweeps (each missing entry set to the
    mean over all its neighbors) until the largest update falls below ``tol``.
    """
    missing = np.asarray(missing, dtype=bool)
    if missing.ndim == 1:
        raise ValueError("missing mask must have shape (n, d)")
    x = graph.node_features.copy()
    if not missing.any():
        return graph
    adj = graph.adjacency()
    for j in np.nonzero(missing.any(axis=0))[0]:
        col = x[:, j]
        miss = missing[:, j].copy()
        unknown = np.nonzero(miss)[0]
        col[unknown] = 0.0
        known = ~miss
        pending = set(unknown.tolist())
        while pending:
            filled = {}
            for u in pending:
                vals = [col[v] for v in adj[u] if known[v]]
                if vals:
                    filled[u] = sum(vals) / len(vals)
            if not filled:
                raise GraphError(
                    f"feature {graph.feature_names[j]!r}: a connected component has no known values"
                )
            for u, val in filled.items():
                col[u] = val
                known[u] = True
            pending.difference_update(filled)
        for _ in range(max_iter):
            delta = 0.0
            new = col.copy()
            for u in unknown:
                nb = adj[u]
                val = sum(col[v] for v in nb) / len(nb)
                delta = max(delta, abs(val - col[u]))
                new[u] = val
            col[:] = new
            if delta < tol:
                break
        x[:, j] = col
    return graph.with_features(x)
