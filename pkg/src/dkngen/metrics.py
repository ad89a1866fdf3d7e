"""Geometry and topology statistics of conduit networks, plus ensemble summaries.

Geometry metrics use the full graph and its branches (maximal paths whose
interior nodes have degree 2). Topology metrics use the simplified graph in
which every branch is collapsed to an edge.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import networkx as nx
import numpy as np

from .graph import Graph, GraphError
from .io import fmt_real

__all__ = [
    "Branch",
    "SimplifiedGraph",
    "MetricsReport",
    "METRIC_NAMES",
    "find_branches",
    "geometry_stats",
    "orientation_entropy",
    "simplify",
    "betweenness",
    "topology_stats",
    "compute_metrics",
    "summarize",
    "EnsembleReport",
    "ensemble_report",
    "entropy",
]

LENGTH_BINS = 10
AZIMUTH_BIN_DEG = 10.0


@dataclass(frozen=True)
class Branch:
    node_path: tuple[int, ...]
    length: float
    endpoint_distance: float

    @property
    def closed(self) -> bool:
        return self.node_path[0] == self.node_path[-1]

    @property
    def interior(self) -> tuple[int, ...]:
        return self.node_path[1:-1]

    @property
    def n_edges(self) -> int:
        return len(self.node_path) - 1


def _branch(graph: Graph, path: list[int]) -> Branch:
    xyz = graph.node_features[:, : graph.k]
    pts = xyz[path]
    length = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())
    chord = float(np.linalg.norm(pts[-1] - pts[0]))
    return Branch(tuple(path), length, chord)


def find_branches(graph: Graph) -> list[Branch]:
    """Partition the edges into branches.

    Open branches run between nodes of degree != 2. A cycle made only of
    degree-2 nodes becomes one closed branch starting at its smallest node.
    """
    adj = graph.adjacency()
    deg = graph.degrees()
    used: set[tuple[int, int]] = set()
    branches = []

    def walk(start: int, nxt: int) -> list[int]:
        path = [start, nxt]
        used.add((min(start, nxt), max(start, nxt)))
        prev, cur = start, nxt
        while deg[cur] == 2 and cur != start:
            a, b = adj[cur]
            step = b if a == prev else a
            e = (min(cur, step), max(cur, step))
            if e in used:
                break
            used.add(e)
            path.append(step)
            prev, cur = cur, step
        return path

    for u in range(graph.n):
        if deg[u] == 2:
            continue
        for v in adj[u]:
            if (min(u, v), max(u, v)) not in used:
                branches.append(_branch(graph, walk(u, v)))
    for u in range(graph.n):
        for v in adj[u]:
            if (min(u, v), max(u, v)) not in used:
                branches.append(_branch(graph, walk(u, v)))
    return branches


def entropy(counts: np.ndarray, base: float) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return float("nan")
    c = counts[counts > 0]
    # N log N - sum c log c keeps the single-bin and uniform cases exact
    h = (total * math.log(total) - float((c * np.log(c)).sum())) / (total * math.log(base))
    return float(max(h, 0.0))


def geometry_stats(graph: Graph, branches: Sequence[Branch] | None = None) -> dict[str, float]:
    """mean_length, cv_length, length_entropy and mean_tortuosity of the branches."""
    if branches is None:
        branches = find_branches(graph)
    if not branches:
        raise GraphError("graph has no branches")
    lengths = np.array([b.length for b in branches])
    mean = float(lengths.mean())
    cv = float(lengths.std() / mean) if mean > 0 else float("nan")
    lo, hi = lengths.min(), lengths.max()
    # lengths equal up to rounding count as one bin
    if hi - lo > 1e-9 * max(abs(hi), 1e-300):
        counts, _ = np.histogram(lengths, bins=LENGTH_BINS, range=(lo, hi))
        h = entropy(counts, LENGTH_BINS)
    else:
        h = 0.0
    tort = [b.length / b.endpoint_distance for b in branches if not b.closed and b.endpoint_distance > 0]
    return {
        "mean_length": mean,
        "cv_length": cv,
        "length_entropy": h,
        "mean_tortuosity": float(np.mean(tort)) if tort else float("nan"),
    }


def azimuths(graph: Graph) -> np.ndarray:
    """Undirected edge azimuths in degrees, folded to [0, 180); vertical edges dropped."""
    if graph.k < 2:
        raise GraphError("azimuths need two horizontal coordinates")
    xy = graph.node_features[:, :2]
    delta = xy[graph.edges[:, 1]] - xy[graph.edges[:, 0]]
    keep = np.any(delta != 0, axis=1)
    delta = delta[keep]
    az = np.degrees(np.arctan2(delta[:, 0], delta[:, 1])) % 180.0
    return np.where(az >= 180.0, 0.0, az)


def orientation_entropy(graph: Graph) -> float:
    """Entropy of edge azimuths over 18 bins of 10 degrees, normalized to [0, 1]."""
    az = azimuths(graph)
    if az.size == 0:
        raise GraphError("no edge with horizontal extent")
    nbins = int(round(180.0 / AZIMUTH_BIN_DEG))
    idx = np.minimum((az // AZIMUTH_BIN_DEG).astype(np.int64), nbins - 1)
    return entropy(np.bincount(idx, minlength=nbins), nbins)


# ----------------------------------------------------------------------------------------
# simplification and topology
# ----------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SimplifiedGraph:
    """Collapsed graph; ``nodes[i]`` is the original index of local node ``i``."""

    graph: Graph
    nodes: np.ndarray
    markers: frozenset[int]  # original indices of kept degree-2 nodes

    @property
    def n(self) -> int:
        return self.graph.n

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.graph.n))
        g.add_edges_from(self.graph.edges.tolist())
        return g


def simplify(graph: Graph, branches: Sequence[Branch] | None = None) -> SimplifiedGraph:
    """Collapse branches to single edges while preserving the topology.

    Among branches sharing the same endpoint pair, the first in canonical order
    (sorted interior node indices) becomes a direct edge and every other one
    keeps its middle interior node. Closed branches keep two interior nodes.
    """
    if branches is None:
        branches = find_branches(graph)
    deg = graph.degrees()
    keep = {u for u in range(graph.n) if deg[u] != 2}
    edges: list[tuple[int, int]] = []
    markers: set[int] = set()
    groups: dict[tuple[int, int], list[Branch]] = {}
    for b in branches:
        if b.closed:
            inner = b.interior
            i = (len(inner) - 1) // 2
            a, c = inner[i], inner[i + 1]
            u = b.node_path[0]
            keep.update((u, a, c))
            markers.update((a, c))
            edges += [(u, a), (a, c), (c, u)]
        else:
            u, v = b.node_path[0], b.node_path[-1]
            groups.setdefault((min(u, v), max(u, v)), []).append(b)
    for (u, v), group in groups.items():
        group = sorted(group, key=lambda b: sorted(b.interior))
        edges.append((u, v))
        for b in group[1:]:
            mid = b.interior[(len(b.interior) - 1) // 2]
            keep.add(mid)
            markers.add(mid)
            edges += [(u, mid), (mid, v)]
    if graph.n == 1:
        keep = {0}
    nodes = np.array(sorted(keep), dtype=np.int64)
    local = {int(o): i for i, o in enumerate(nodes)}
    local_edges = [(local[a], local[b]) for a, b in edges]
    g = Graph(graph.node_features[nodes], local_edges, graph.feature_names, graph.k)
    return SimplifiedGraph(g, nodes, frozenset(markers))


def betweenness(simplified: SimplifiedGraph | Graph) -> np.ndarray:
    """Normalized betweenness ``2/((n-1)(n-2)) * sum_{s,t} paths_through_v / paths``."""
    g = simplified.graph if isinstance(simplified, SimplifiedGraph) else simplified
    if g.n < 3:
        raise GraphError("betweenness needs at least 3 nodes")
    G = nx.Graph()
    G.add_nodes_from(range(g.n))
    G.add_edges_from(g.edges.tolist())
    bc = nx.betweenness_centrality(G, normalized=True)
    return np.array([bc[v] for v in range(g.n)])


def degree_correlation(g: Graph) -> float:
    """Pearson correlation of endpoint degrees over both edge orientations."""
    if g.n_edges == 0:
        return float("nan")
    deg = g.degrees()
    a = np.concatenate([deg[g.edges[:, 0]], deg[g.edges[:, 1]]]).astype(np.float64)
    b = np.concatenate([deg[g.edges[:, 1]], deg[g.edges[:, 0]]]).astype(np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        return float("nan")
    return float((da * db).sum() / denom)


def topology_stats(simplified: SimplifiedGraph | Graph) -> dict[str, float]:
    g = simplified.graph if isinstance(simplified, SimplifiedGraph) else simplified
    if not g.is_connected():
        raise GraphError("graph not connected")
    G = nx.Graph()
    G.add_nodes_from(range(g.n))
    G.add_edges_from(g.edges.tolist())
    aspl = nx.average_shortest_path_length(G) if g.n >= 2 else float("nan")
    if g.n >= 3:
        bc = betweenness(g)
        cpd = float((bc.max() - bc).sum() / (g.n - 1))
    else:
        cpd = float("nan")
    deg = g.degrees().astype(np.float64)
    mean_deg = 2.0 * g.n_edges / g.n
    return {
        "aspl": float(aspl),
        "cpd": cpd,
        "node_degree_corr": degree_correlation(g),
        "mean_degree": mean_deg,
        "cv_degree": float(deg.std() / mean_deg) if mean_deg > 0 else float("nan"),
    }


# ----------------------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    mean_length: float
    cv_length: float
    length_entropy: float
    mean_tortuosity: float
    orientation_entropy: float
    aspl: float
    cpd: float
    node_degree_corr: float
    mean_degree: float
    cv_degree: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


METRIC_NAMES = tuple(f.name for f in fields(MetricsReport))


def compute_metrics(graph: Graph) -> MetricsReport:
    """All ten metrics; a metric whose precondition fails is reported as NaN."""
    values = dict.fromkeys(METRIC_NAMES, float("nan"))
    try:
        branches = find_branches(graph)
    except GraphError:
        branches = []
    if branches:
        values.update(geometry_stats(graph, branches))
    try:
        values["orientation_entropy"] = orientation_entropy(graph)
    except GraphError:
        pass
    if branches:
        try:
            values.update(topology_stats(simplify(graph, branches)))
        except GraphError:
            pass
    return MetricsReport(**values)


SUMMARY_FIELDS = ("min", "q1", "median", "q3", "max", "mean", "n_missing")


def summarize(values: Sequence[float]) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    ok = v[np.isfinite(v)]
    out = {"n_missing": int(v.size - ok.size)}
    if ok.size == 0:
        out.update(dict.fromkeys(SUMMARY_FIELDS[:-1], float("nan")))
        return out
    q1, med, q3 = np.percentile(ok, [25, 50, 75])
    out.update(
        min=float(ok.min()), q1=float(q1), median=float(med), q3=float(q3), max=float(ok.max()), mean=float(ok.mean())
    )
    return out


@dataclass
class Histogram:
    name: str
    set: str
    edges: np.ndarray
    counts: np.ndarray


@dataclass
class EnsembleReport:
    per_graph: dict[str, list[MetricsReport]]
    summaries: dict[tuple[str, str], dict[str, float]]
    histograms: list[Histogram]

    def format(self) -> str:
        lines = []
        for name in METRIC_NAMES:
            for s in ("a", "b"):
                summ = self.summaries[(name, s)]
                lines.append(f"#metric name={name} set={s}")
                vals = [fmt_real(summ[f]) if f != "n_missing" else str(summ[f]) for f in SUMMARY_FIELDS]
                lines.append(" ".join(vals))
        for h in self.histograms:
            lines.append(f"#hist name={h.name} set={h.set} bins={len(h.counts)}")
            for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                lines.append(f"{fmt_real(lo)} {fmt_real(hi)} {int(c)}")
        return "\n".join(lines) + "\n"

    def csv(self, which: str) -> str:
        rows = ["graph," + ",".join(METRIC_NAMES)]
        for i, rep in enumerate(self.per_graph[which]):
            d = rep.as_dict()
            rows.append(f"{i}," + ",".join("" if not np.isfinite(d[k]) else fmt_real(d[k]) for k in METRIC_NAMES))
        return "\n".join(rows) + "\n"


def _hist_edges(values: np.ndarray, bins: int, integer: bool) -> np.ndarray:
    if values.size == 0:
        return np.array([0.0, 1.0])
    lo, hi = float(values.min()), float(values.max())
    if integer:
        return np.arange(math.floor(lo), math.floor(hi) + 2, dtype=np.float64) - 0.5
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def ensemble_report(set_a: Sequence[Graph], set_b: Sequence[Graph], feature_bins: int = 30) -> EnsembleReport:
    """Per-metric summaries and shared-bin histograms for two graph sets."""
    if not set_a or not set_b:
        raise ValueError("both graph sets must be nonempty")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per = {"a": [compute_metrics(g) for g in set_a], "b": [compute_metrics(g) for g in set_b]}
    summaries = {}
    for name in METRIC_NAMES:
        for s, reps in per.items():
            summaries[(name, s)] = summarize([getattr(r, name) for r in reps])
    hists = []
    sets = {"a": set_a, "b": set_b}
    counts = {s: np.array([g.n for g in gs], dtype=np.float64) for s, gs in sets.items()}
    edges = _hist_edges(np.concatenate(list(counts.values())), 0, integer=True)
    for s in ("a", "b"):
        hists.append(Histogram("node_count", s, edges, np.histogram(counts[s], edges)[0]))
    names = set_a[0].feature_names
    d = min(set_a[0].d, set_b[0].d)
    for j in range(d):
        cols = {s: np.concatenate([g.node_features[:, j] for g in gs]) for s, gs in sets.items()}
        edges = _hist_edges(np.concatenate(list(cols.values())), feature_bins, integer=False)
        for s in ("a", "b"):
            hists.append(Histogram(f"feature:{names[j]}", s, edges, np.histogram(cols[s], edges)[0]))
    return EnsembleReport(per, summaries, hists)
