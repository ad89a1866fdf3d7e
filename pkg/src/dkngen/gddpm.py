"""Denoising diffusion on graph node features with a GraphSAGE U-Net."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .graph import FeatureStats, Graph
from .nn import DTYPE, MLP, compute_gradients, make_optimizer, module_dtype, mse_loss, sinusoidal_embed, uniform_init

__all__ = [
    "NoiseSchedule",
    "build_noise_schedule",
    "q_sample",
    "q_step",
    "neighbor_mean_operator",
    "SAGELayer",
    "graphsage_layer",
    "Denoiser",
    "parse_layout",
    "GraphBatch",
    "denoiser_forward",
    "train_features",
    "generate_features",
    "generate_features_batch",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def index(self, t):
        t = np.asarray(t)
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"timestep outside [1, {self.T}]")
        return t - 1


def build_noise_schedule(T: int = 2400, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with its derived alpha and cumulative alpha products."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def _coef(values: np.ndarray, like):
    if isinstance(like, torch.Tensor):
        values = torch.as_tensor(values, dtype=like.dtype)
    if np.ndim(values) == 1:
        values = values[:, None]
    return values


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Closed-form forward noising ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` is a scalar or one timestep per row of ``x0``.
    """
    ab = schedule.alpha_bar[schedule.index(t)]
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), x0) * eps


def q_step(x_prev, t, eps, schedule: NoiseSchedule):
    """Single forward transition ``x_{t-1} -> x_t``."""
    i = schedule.index(t)
    return _coef(np.sqrt(schedule.alpha[i]), x_prev) * x_prev + _coef(np.sqrt(schedule.beta[i]), x_prev) * eps


# ----------------------------------------------------------------------------------------
# GraphSAGE U-Net
# ----------------------------------------------------------------------------------------


def neighbor_mean_operator(edges: np.ndarray, n: int, dtype=DTYPE) -> torch.Tensor:
    """Sparse ``(n, n)`` row-normalized adjacency; isolated rows stay zero."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    deg = np.bincount(src, minlength=n).astype(np.float64)
    vals = 1.0 / deg[src] if len(src) else np.zeros(0)
    order = np.lexsort((dst, src))
    idx = torch.from_numpy(np.stack([src[order], dst[order]]))
    return torch.sparse_coo_tensor(
        idx, torch.from_numpy(vals[order]).to(dtype), (n, n), check_invariants=False
    ).coalesce()


class SAGELayer(nn.Module):
    """``u' = W1 u + W2 mean_{j in N(i)} u_j``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None, dtype=DTYPE):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.W1 = nn.Parameter(uniform_init((d_out, d_in), d_in, rng, dtype))
        self.W2 = nn.Parameter(uniform_init((d_out, d_in), d_in, rng, dtype))

    def forward(self, u: torch.Tensor, agg: torch.Tensor) -> torch.Tensor:
        if u.shape[-1] != self.d_in:
            raise ValueError(f"expected {self.d_in} input features, got {u.shape[-1]}")
        return u @ self.W1.T + torch.sparse.mm(agg, u) @ self.W2.T


def graphsage_layer(topology: Graph, features, W1, W2) -> torch.Tensor:
    features = torch.as_tensor(features, dtype=DTYPE)
    W1 = torch.as_tensor(W1, dtype=DTYPE)
    W2 = torch.as_tensor(W2, dtype=DTYPE)
    if features.shape[0] != topology.n:
        raise ValueError(f"{features.shape[0]} feature rows for {topology.n} nodes")
    if W1.shape != W2.shape or W1.shape[1] != features.shape[1]:
        raise ValueError("weight shapes do not match the features")
    agg = neighbor_mean_operator(topology.edges, topology.n)
    return features @ W1.T + torch.sparse.mm(agg, features) @ W2.T


def parse_layout(layout) -> tuple[int, int, int]:
    if isinstance(layout, str):
        parts = tuple(int(p) for p in layout.split("/"))
    else:
        parts = tuple(int(p) for p in layout)
    if len(parts) != 3 or parts[0] < 2 or parts[2] < 2 or parts[1] < 1:
        raise ValueError(f"layout must be down/mid/up with down, up >= 2 and mid >= 1, got {layout!r}")
    return parts


class Denoiser(nn.Module):
    """U-Net of GraphSAGE layers predicting the injected noise.

    Down path: two blocks; bottleneck: one block; up path: two blocks, each
    preceded by a linear mixer over ``[h, skip]``. A learned projection of the
    sinusoidal timestep embedding is added to the hidden state at every block
    entry.
    """

    def __init__(
        self,
        d: int,
        layout=(8, 9, 8),
        width: int | None = None,
        rng: np.random.Generator | None = None,
        dtype=DTYPE,
    ):
        super().__init__()
        down, mid, up = parse_layout(layout)
        self.d = d
        self.layout = (down, mid, up)
        w = 8 * d if width is None else width
        self.width = w
        self.inp = MLP(d, w, "none", rng, dtype=dtype)
        splits = [(down + 1) // 2, down // 2, mid, up // 2, (up + 1) // 2]
        self.blocks = nn.ModuleList(
            nn.ModuleList(SAGELayer(w, w, rng, dtype) for _ in range(k)) for k in splits
        )
        self.time_proj = nn.ModuleList(MLP(w, w, "none", rng, dtype=dtype) for _ in splits)
        self.mix = nn.ModuleList(MLP(2 * w, w, "none", rng, dtype=dtype) for _ in range(2))
        # zero output head: the untrained model predicts no noise
        self.out = MLP(w, d, "none", None, dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return module_dtype(self)

    @property
    def n_sage_layers(self) -> int:
        return sum(len(b) for b in self.blocks)

    def _block(self, i: int, h, emb, agg):
        h = h + self.time_proj[i](emb)
        for layer in self.blocks[i]:
            h = torch.relu(layer(h, agg))
        return h

    def forward(self, x: torch.Tensor, t: torch.Tensor, agg: torch.Tensor) -> torch.Tensor:
        """``x`` is ``(N, d)``, ``t`` holds one timestep per node."""
        if x.shape[-1] != self.d:
            raise ValueError(f"expected {self.d} features, got {x.shape[-1]}")
        emb = sinusoidal_embed(t, self.width, dtype=x.dtype)
        h = self.inp(x)
        h = skip1 = self._block(0, h, emb, agg)
        h = skip2 = self._block(1, h, emb, agg)
        h = self._block(2, h, emb, agg)
        h = self._block(3, self.mix[0](torch.cat([h, skip2], dim=-1)), emb, agg)
        h = self._block(4, self.mix[1](torch.cat([h, skip1], dim=-1)), emb, agg)
        return self.out(h)


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of graphs sharing one aggregation operator."""

    agg: torch.Tensor
    offsets: np.ndarray  # node offset of each graph, length B + 1

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph], dtype=DTYPE) -> "GraphBatch":
        sizes = np.array([g.n for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        edges = np.concatenate(
            [g.edges + off for g, off in zip(graphs, offsets[:-1])] or [np.zeros((0, 2), np.int64)]
        )
        return cls(neighbor_mean_operator(edges, int(offsets[-1]), dtype), offsets)

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def per_node(self, values) -> np.ndarray:
        return np.repeat(np.asarray(values), self.sizes)

    def center(self, x, columns: int):
        """Subtract each graph's mean from the first ``columns`` features."""
        if columns <= 0:
            return x
        sizes = self.sizes
        if isinstance(x, np.ndarray):
            means = np.add.reduceat(x[:, :columns], self.offsets[:-1], axis=0) / sizes[:, None]
            out = x.copy()
            out[:, :columns] -= np.repeat(means, sizes, axis=0)
            return out
        owner = torch.from_numpy(np.repeat(np.arange(len(sizes)), sizes))
        sums = torch.zeros(len(sizes), columns, dtype=x.dtype).index_add_(0, owner, x[:, :columns])
        means = sums / torch.from_numpy(sizes).to(x.dtype)[:, None]
        return torch.cat([x[:, :columns] - means[owner], x[:, columns:]], dim=1)


def denoiser_forward(topology: Graph, xt, t: int, model: Denoiser) -> torch.Tensor:
    xt = torch.as_tensor(xt, dtype=model.dtype)
    if xt.shape != (topology.n, model.d):
        raise ValueError(f"features of shape {tuple(xt.shape)} for n={topology.n}, d={model.d}")
    agg = neighbor_mean_operator(topology.edges, topology.n, model.dtype)
    return model(xt, torch.full((topology.n,), int(t)), agg)


def noisy_batch(
    graphs: Sequence[Graph],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    dtype=DTYPE,
    centered_columns: int = 0,
):
    """Draw one timestep per graph and Gaussian noise; returns (batch, t_nodes, eps, xt).

    The first ``centered_columns`` features of both data and noise are
    projected onto zero mean per graph.
    """
    batch = GraphBatch.from_graphs(graphs, dtype)
    x0 = batch.center(np.concatenate([g.node_features for g in graphs]), centered_columns)
    t_graph = rng.integers(1, schedule.T + 1, size=len(graphs))
    t_nodes = batch.per_node(t_graph)
    eps = batch.center(rng.standard_normal(x0.shape), centered_columns)
    xt = q_sample(x0, t_nodes, eps, schedule)
    return batch, torch.from_numpy(t_nodes), torch.from_numpy(eps).to(dtype), torch.from_numpy(xt).to(dtype)


def train_features(
    dataset: Sequence[Graph],
    schedule: NoiseSchedule,
    epochs: int,
    seed: int | np.random.Generator,
    *,
    layout=(8, 9, 8),
    model: Denoiser | None = None,
    start_epoch: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    dtype=torch.float32,
    centered_columns: int = 0,
    on_epoch: Callable[[int, float, Denoiser], None] | None = None,
) -> tuple[Denoiser, list[float]]:
    """Epsilon-prediction MSE training on standardized dataset features.

    The leading ``centered_columns`` features (per-graph centered
    coordinates) are diffused in the zero-mean subspace: data, noise and the
    prediction are all centered per graph in those columns.
    """
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    d = dataset[0].d
    if model is None:
        model = Denoiser(d, layout, rng=np.random.default_rng([seed, 0xD1F]), dtype=dtype)
    opt = make_optimizer(model.parameters(), lr=lr)
    losses = []
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, epoch, 0xE90C])
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            graphs = [dataset[i] for i in order[start : start + batch_size]]
            batch, t_nodes, eps, xt = noisy_batch(graphs, schedule, rng, model.dtype, centered_columns)
            opt.zero_grad(set_to_none=False)
            eps_hat = batch.center(model(xt, t_nodes, batch.agg), centered_columns)
            value = mse_loss(eps_hat, eps)
            compute_gradients(value)
            opt.step()
            total += value.item()
            count += 1
        losses.append(total / count)
        log.debug("features epoch %d loss %.6f", epoch, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1], model)
    return model, losses


@torch.no_grad()
def generate_features_batch(
    topologies: Sequence[Graph],
    model: Denoiser,
    schedule: NoiseSchedule,
    stats: FeatureStats | None,
    rngs: Sequence[np.random.Generator],
    feature_names: Sequence[str] | None = None,
    k: int | None = None,
    centered_columns: int = 0,
) -> list[Graph]:
    """Reverse diffusion on each topology; graph ``b`` draws noise from ``rngs[b]`` only.

    Each step uses the epsilon-parameterized posterior mean and variance
    ``beta_t`` (no noise on the last step), then features are mapped back
    through ``stats``. With ``centered_columns`` the initial noise, every
    noise prediction and every injected noise draw are centered per graph in
    those columns, matching training.
    """
    if not topologies:
        return []
    d = model.d
    dtype = model.dtype
    batch = GraphBatch.from_graphs(topologies, dtype)
    off = batch.offsets
    N = int(off[-1])

    def noise():
        z = np.concatenate([r.standard_normal((g.n, d)) for r, g in zip(rngs, topologies)])
        return batch.center(torch.from_numpy(z).to(dtype), centered_columns)

    x = noise()
    for t in range(schedule.T, 0, -1):
        i = t - 1
        eps_hat = batch.center(model(x, torch.full((N,), t), batch.agg), centered_columns)
        beta, alpha, ab = schedule.beta[i], schedule.alpha[i], schedule.alpha_bar[i]
        x = (x - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
        if t > 1:
            x = x + math.sqrt(beta) * noise()
    feats = x.numpy().astype(np.float64)
    if stats is not None:
        feats = stats.inverse(feats)
    names = tuple(feature_names) if feature_names is not None else (stats.feature_names if stats else ())
    out = []
    for b, g in enumerate(topologies):
        kk = k if k is not None else min(g.k, d)
        out.append(Graph(feats[off[b] : off[b + 1]], g.edges, names or (), kk))
    return out


def generate_features(
    topology: Graph,
    model: Denoiser,
    schedule: NoiseSchedule,
    stats: FeatureStats | None,
    rng: np.random.Generator,
    **kw,
) -> Graph:
    return generate_features_batch([topology], model, schedule, stats, [rng], **kw)[0]
