"""Line-oriented text formats for graphs, datasets, feature stats and checkpoints.

All reals are written with 17 significant digits so that write -> read -> write
is byte-identical.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .graph import FeatureStats, Graph

__all__ = [
    "FormatError",
    "fmt_real",
    "format_graph",
    "write_graphs",
    "read_graphs",
    "read_graph",
    "format_stats",
    "parse_stats",
    "write_checkpoint",
    "read_checkpoint",
    "atomic_write",
    "parse_header",
]


class FormatError(ValueError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line


def fmt_real(v: float) -> str:
    s = format(float(v), ".17g")
    return "0" if s == "-0" else s


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_header(line: str, tag: str, lineno: int | None = None, path=None) -> dict[str, str]:
    """Parse ``#tag key=value key=value`` into a dict."""
    parts = line.strip().split()
    if not parts or parts[0] != f"#{tag}":
        raise FormatError(f"expected '#{tag}' header, got {line.strip()!r}", lineno, path)
    out = {}
    for p in parts[1:]:
        if "=" not in p:
            raise FormatError(f"malformed header field {p!r}", lineno, path)
        key, val = p.split("=", 1)
        out[key] = val
    return out


# ----------------------------------------------------------------------------------------
# graphs
# ----------------------------------------------------------------------------------------


def format_graph(graph: Graph) -> str:
    lines = [
        f"#graph n={graph.n} d={graph.d} k={graph.k} features={','.join(graph.feature_names)}"
    ]
    for row in graph.node_features:
        lines.append(" ".join(fmt_real(v) for v in row))
    lines.append(f"#edges e={graph.n_edges}")
    for i, j in graph.edges.tolist():
        lines.append(f"{i} {j}")
    return "\n".join(lines) + "\n"


def write_graphs(path, graphs: Iterable[Graph], header: str | None = None) -> None:
    """Write a dataset file (concatenated graph blocks)."""
    text = "".join(format_graph(g) for g in graphs)
    if header is not None:
        text = header.rstrip("\n") + "\n" + text
    atomic_write(path, text)


def _iter_graphs(lines: Sequence[str], path=None) -> Iterator[Graph]:
    i = 0
    total = len(lines)
    while i < total:
        line = lines[i]
        if not line.strip() or (line.startswith("#") and not line.startswith("#graph")):
            i += 1
            continue
        head = parse_header(line, "graph", i + 1, path)
        try:
            n, d, k = int(head["n"]), int(head["d"]), int(head["k"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad graph header: {exc}", i + 1, path) from None
        names = tuple(head.get("features", "").split(",")) if head.get("features") else ()
        if i + 1 + n >= total + 1:
            raise FormatError("truncated node block", total, path)
        feats = np.empty((n, d))
        for r in range(n):
            lineno = i + 2 + r
            if lineno - 1 >= total:
                raise FormatError("truncated node block", total, path)
            vals = lines[lineno - 1].split()
            if len(vals) != d:
                raise FormatError(f"expected {d} values, got {len(vals)}", lineno, path)
            try:
                feats[r] = [float(v) for v in vals]
            except ValueError:
                raise FormatError("non-numeric feature value", lineno, path) from None
        i += 1 + n
        if i >= total:
            raise FormatError("missing '#edges' line", total, path)
        eh = parse_header(lines[i], "edges", i + 1, path)
        try:
            e = int(eh["e"])
        except (KeyError, ValueError):
            raise FormatError("bad '#edges' header", i + 1, path) from None
        edges = np.empty((e, 2), dtype=np.int64)
        for r in range(e):
            lineno = i + 2 + r
            if lineno - 1 >= total:
                raise FormatError("truncated edge block", total, path)
            vals = lines[lineno - 1].split()
            if len(vals) != 2:
                raise FormatError("edge line must hold two indices", lineno, path)
            try:
                a, b = int(vals[0]), int(vals[1])
            except ValueError:
                raise FormatError("non-integer edge index", lineno, path) from None
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise FormatError(f"invalid edge {a} {b}", lineno, path)
            edges[r] = (a, b)
        i += 1 + e
        try:
            yield Graph(feats, edges, names, k)
        except ValueError as exc:
            raise FormatError(str(exc), i, path) from None


def read_graphs(path) -> list[Graph]:
    text = Path(path).read_text(encoding="utf-8")
    return list(_iter_graphs(text.splitlines(), path))


def read_graph(path) -> Graph:
    graphs = read_graphs(path)
    if len(graphs) != 1:
        raise FormatError(f"expected one graph, found {len(graphs)}", None, path)
    return graphs[0]


# ----------------------------------------------------------------------------------------
# feature stats
# ----------------------------------------------------------------------------------------


def format_stats(stats: FeatureStats) -> str:
    names = stats.feature_names or tuple(f"f{i}" for i in range(len(stats.mean)))
    return "".join(
        f"#stats name={name} mean={fmt_real(mu)} std={fmt_real(sd)}\n"
        for name, mu, sd in zip(names, stats.mean, stats.std)
    )


def parse_stats(lines: Iterable[str]) -> FeatureStats:
    names, means, stds = [], [], []
    for lineno, line in enumerate(lines, 1):
        if not line.startswith("#stats"):
            continue
        h = parse_header(line, "stats", lineno)
        names.append(h["name"])
        means.append(float(h["mean"]))
        stds.append(float(h["std"]))
    if not names:
        raise FormatError("no '#stats' lines")
    return FeatureStats(np.array(means), np.array(stds), tuple(names))


# ----------------------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------------------


def write_checkpoint(
    path,
    model: str,
    config: dict,
    params: Sequence[tuple[str, np.ndarray]],
    stats: FeatureStats | None = None,
) -> None:
    out = [f"#checkpoint version=1 model={model}"]
    out.append("#config " + " ".join(f"{k}={v}" for k, v in config.items()))
    if stats is not None:
        out.append(format_stats(stats).rstrip("\n"))
    for name, value in params:
        value = np.asarray(value, dtype=np.float64)
        shape = "x".join(str(s) for s in value.shape) if value.ndim else "1"
        out.append(f"#param name={name} shape={shape}")
        out.extend(fmt_real(v) for v in value.ravel())
    atomic_write(path, "\n".join(out) + "\n")


def read_checkpoint(path, model: str | None = None):
    """Return ``(model, config, params, stats)``; ``params`` keeps file order."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError("empty checkpoint", 1, path)
    head = parse_header(lines[0], "checkpoint", 1, path)
    if head.get("version") != "1":
        raise FormatError(f"unsupported checkpoint version {head.get('version')}", 1, path)
    kind = head.get("model")
    if model is not None and kind != model:
        raise FormatError(f"checkpoint holds model={kind}, expected {model}", 1, path)
    config = parse_header(lines[1], "config", 2, path) if len(lines) > 1 else {}
    stat_lines = []
    params: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines):
        line = lines[i]
        if line.startswith("#stats"):
            stat_lines.append(line)
            i += 1
            continue
        h = parse_header(line, "param", i + 1, path)
        shape = tuple(int(s) for s in h["shape"].split("x"))
        size = int(np.prod(shape))
        block = lines[i + 1 : i + 1 + size]
        if len(block) != size:
            raise FormatError(f"truncated parameter {h['name']}", len(lines), path)
        try:
            params[h["name"]] = np.array([float(v) for v in block]).reshape(shape)
        except ValueError:
            raise FormatError(f"non-numeric value in parameter {h['name']}", i + 1, path) from None
        i += 1 + size
    stats = parse_stats(stat_lines) if stat_lines else None
    return kind, config, params, stats
