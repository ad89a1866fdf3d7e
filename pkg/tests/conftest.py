import numpy as np
import pytest

from dkngen.graph import Graph


def grid_graph(rows: int, cols: int) -> Graph:
    """Unit-spaced grid; node ``r * cols + c`` sits at ``(c, r)``."""
    xy = np.array([(c, r) for r in range(rows) for c in range(cols)], dtype=np.float64)
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1))
            if r + 1 < rows:
                edges.append((v, v + cols))
    return Graph(xy, edges)


def path_graph(n: int, d: int = 2) -> Graph:
    x = np.zeros((n, d))
    x[:, 0] = np.arange(n)
    return Graph(x, [(i, i + 1) for i in range(n - 1)], k=min(d, 2))


def star_graph(leaves: int) -> Graph:
    x = np.zeros((leaves + 1, 2))
    ang = 2 * np.pi * np.arange(leaves) / max(leaves, 1)
    x[1:, 0], x[1:, 1] = np.cos(ang), np.sin(ang)
    return Graph(x, [(0, i) for i in range(1, leaves + 1)])


def random_connected(rng: np.random.Generator, n: int, extra: float = 0.3, d: int = 2) -> Graph:
    """Random spanning tree plus roughly ``extra * n`` chords, random features."""
    edges = set()
    order = rng.permutation(n)
    for i in range(1, n):
        a, b = int(order[i]), int(order[rng.integers(i)])
        edges.add((min(a, b), max(a, b)))
    for _ in range(int(extra * n)):
        a, b = rng.integers(n, size=2)
        if a != b:
            edges.add((int(min(a, b)), int(max(a, b))))
    return Graph(rng.standard_normal((n, d)), sorted(edges), k=min(d, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_rel_error(fn, tensors, h: float = 1e-6, max_entries: int | None = None, rng=None) -> float:
    """Largest per-tensor relative error between autograd and central differences.

    ``fn`` maps nothing to a scalar tensor built from ``tensors`` (float64 leaves
    with ``requires_grad``). With ``max_entries`` only a random subset of each
    tensor's entries is perturbed. Each tensor's error is scaled by the larger
    of its own gradient norm and 1e-3 of the global gradient norm: central
    differences at h=1e-6 carry ~1e-10 absolute noise, which would swamp
    tensors whose gradients are themselves ~1e-6.
    """
    import torch

    for t in tensors:
        t.grad = None
    fn().backward()
    analytic_all = [t.grad.detach().reshape(-1).clone() for t in tensors]
    global_norm = float(torch.cat(analytic_all).norm())
    worst = 0.0
    for t, analytic in zip(tensors, analytic_all):
        flat = t.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(idx.size, max_entries, replace=False)
        numeric = np.empty(idx.size)
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * h)
        a = analytic.numpy()[idx]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-3 * global_norm, 1e-12)
        worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
    return worst
