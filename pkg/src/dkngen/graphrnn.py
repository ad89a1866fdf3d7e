"""Autoregressive topology model: graph-level and edge-level GRU stacks."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .graph import BandedAdjacency, BandwidthExceeded, Graph, bfs_order, decode_banded, encode_banded
from .nn import DTYPE, MLP, GRULayer, bce_loss, compute_gradients, gru_stack, make_optimizer, module_dtype

__all__ = [
    "GraphRnnConfig",
    "GraphRNN",
    "TrainingSequence",
    "ModelCollapsed",
    "graph_to_training_sequences",
    "graphrnn_forward",
    "train_topology",
    "sample_topology",
    "sample_topologies",
]

log = logging.getLogger(__name__)

MAX_ORDERING_RETRIES = 100
MAX_DEGENERATE_RETRIES = 100


class ModelCollapsed(RuntimeError):
    pass


@dataclass(frozen=True)
class GraphRnnConfig:
    m: int
    n_max: int
    graph_layers: int = 4
    graph_hidden: int = 48
    graph_gru_in: int = 64
    graph_out1: int = 16
    graph_out2: int = 32
    edge_layers: int = 4
    edge_gru_in: int = 24
    edge_out1: int = 36

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")

    @property
    def edge_hidden(self) -> int:
        # the graph-level output seeds the edge-level hidden state
        return self.graph_out2

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GraphRnnConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: int(v) for k, v in d.items() if k in names})


class GraphRNN(nn.Module):
    """Graph-level and edge-level stacks; ``rng=None`` gives all-zero parameters."""

    def __init__(self, config: GraphRnnConfig, rng: np.random.Generator | None = None, dtype=DTYPE):
        super().__init__()
        c = config
        self.config = c
        self.g_in = MLP(c.m, c.graph_gru_in, "relu", rng, dtype=dtype)
        self.g_gru = nn.ModuleList(
            GRULayer(c.graph_gru_in if i == 0 else c.graph_hidden, c.graph_hidden, rng, dtype)
            for i in range(c.graph_layers)
        )
        self.g_out1 = MLP(c.graph_hidden, c.graph_out1, "relu", rng, dtype=dtype)
        self.g_out2 = MLP(c.graph_out1, c.graph_out2, "relu", rng, dtype=dtype)
        self.e_in = MLP(1, c.edge_gru_in, "relu", rng, dtype=dtype)
        self.e_gru = nn.ModuleList(
            GRULayer(c.edge_gru_in if i == 0 else c.edge_hidden, c.edge_hidden, rng, dtype)
            for i in range(c.edge_layers)
        )
        self.e_out1 = MLP(c.edge_hidden, c.edge_out1, "relu", rng, dtype=dtype)
        self.e_out2 = MLP(c.edge_out1, 1, "sigmoid", rng, dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return module_dtype(self)

    # -- graph level -------------------------------------------------------------------

    def graph_level(self, x_seq: torch.Tensor, h0=None):
        """``x_seq`` is ``(L, B, m)``; returns latents ``(L, B, out2)`` and final states."""
        B = x_seq.shape[1]
        if h0 is None:
            h0 = [x_seq.new_zeros(B, self.config.graph_hidden) for _ in self.g_gru]
        out, finals = gru_stack(self.g_in(x_seq), self.g_gru, h0)
        return self.g_out2(self.g_out1(out)), finals

    # -- edge level --------------------------------------------------------------------

    def edge_level(self, y: torch.Tensor, micro_inputs: torch.Tensor) -> torch.Tensor:
        """Teacher-forced edge probabilities.

        ``y`` is ``(R, out2)``, ``micro_inputs`` is ``(m, R, 1)`` starting with
        the scalar SOS. Returns ``(R, m)``.
        """
        h0 = [y] + [y.new_zeros(y.shape) for _ in self.e_gru[1:]]
        out, _ = gru_stack(self.e_in(micro_inputs), self.e_gru, h0)
        return self.e_out2(self.e_out1(out)).squeeze(-1).T

    def edge_step(self, inp: torch.Tensor, hidden: list[torch.Tensor]):
        """One micro-step for sampling; ``inp`` is ``(R, 1)``."""
        v = self.e_in(inp)
        new = []
        for layer, h in zip(self.e_gru, hidden):
            v = layer(v, h)
            new.append(v)
        return self.e_out2(self.e_out1(v)).squeeze(-1), new

    def forward(self, inputs: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None):
        """Teacher-forced probabilities for padded batches ``(L, B, m)``.

        Returns ``(R, m)`` probabilities for the ``R`` rows selected by ``mask``
        (all rows when ``mask`` is None), ordered step-major.
        """
        m = self.config.m
        y, _ = self.graph_level(inputs)
        if mask is None:
            y_rows, t_rows = y.reshape(-1, y.shape[-1]), targets.reshape(-1, m)
        else:
            y_rows, t_rows = y[mask], targets[mask]
        sos = t_rows.new_ones(t_rows.shape[0], 1)
        micro = torch.cat([sos, t_rows[:, : m - 1]], dim=1).T.unsqueeze(-1)
        return self.edge_level(y_rows, micro)


@dataclass(frozen=True, eq=False)
class TrainingSequence:
    """Teacher-forcing pairs: ``inputs[0]`` is SOS, ``inputs[i] = targets[i-1]``."""

    inputs: np.ndarray
    targets: np.ndarray

    def with_stop_row(self) -> "TrainingSequence":
        m = self.targets.shape[1]
        if len(self.targets):
            inputs = np.vstack([self.inputs, self.targets[-1:]])
        else:
            inputs = np.ones((1, m))
        return TrainingSequence(inputs, np.vstack([self.targets, np.zeros((1, m))]))


def sequence_from_banded(banded: BandedAdjacency) -> TrainingSequence:
    rows = banded.rows.astype(np.float64)
    inputs = np.vstack([np.ones((1, banded.m)), rows[:-1]])[: len(rows)]
    return TrainingSequence(inputs, rows)


def graph_to_training_sequences(graph: Graph, m: int, rng: np.random.Generator) -> TrainingSequence:
    """Encode ``graph`` under a fresh BFS ordering (redrawn if the band is too narrow)."""
    last = None
    for _ in range(MAX_ORDERING_RETRIES):
        perm = bfs_order(graph, rng)
        try:
            return sequence_from_banded(encode_banded(graph, perm, m))
        except BandwidthExceeded as exc:
            last = exc
    raise last


def _to_tensor(a, dtype=DTYPE) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def graphrnn_forward(seq: TrainingSequence, model: GraphRNN) -> torch.Tensor:
    """Probabilities ``(L, m)`` for one teacher-forced sequence."""
    x = _to_tensor(seq.inputs, model.dtype).unsqueeze(1)
    y = _to_tensor(seq.targets, model.dtype).unsqueeze(1)
    return model(x, y)


def pad_batch(seqs: Sequence[TrainingSequence], dtype=DTYPE):
    m = seqs[0].targets.shape[1]
    L = max(len(s.targets) for s in seqs)
    B = len(seqs)
    inputs = np.zeros((L, B, m))
    targets = np.zeros((L, B, m))
    mask = np.zeros((L, B), dtype=bool)
    for b, s in enumerate(seqs):
        n = len(s.targets)
        inputs[:n, b] = s.inputs
        targets[:n, b] = s.targets
        mask[:n, b] = True
    return _to_tensor(inputs, dtype), _to_tensor(targets, dtype), torch.from_numpy(mask)


def sequence_loss(model: GraphRNN, seqs: Sequence[TrainingSequence]) -> torch.Tensor:
    inputs, targets, mask = pad_batch(seqs, model.dtype)
    probs = model(inputs, targets, mask)
    return bce_loss(probs, targets[mask])


def train_topology(
    dataset: Sequence[Graph],
    config: GraphRnnConfig,
    epochs: int,
    seed: int | np.random.Generator,
    *,
    model: GraphRNN | None = None,
    start_epoch: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    dtype=torch.float32,
    on_epoch: Callable[[int, float, GraphRNN], None] | None = None,
) -> tuple[GraphRNN, list[float]]:
    """Teacher-forced BCE training; returns the model and per-epoch mean losses.

    Every epoch re-encodes each graph with a fresh BFS ordering and appends one
    all-zero stop row to its target sequence. Epoch ``e`` draws its randomness
    from a stream derived from ``(seed, e)`` so training can resume mid-way.
    """
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    if model is None:
        model = GraphRNN(config, np.random.default_rng([seed, 0x1417]), dtype)
    opt = make_optimizer(model.parameters(), lr=lr)
    losses = []
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, epoch, 0xE90C])
        order = rng.permutation(len(dataset))
        seqs = [graph_to_training_sequences(dataset[i], config.m, rng).with_stop_row() for i in order]
        total, count = 0.0, 0
        for start in range(0, len(seqs), batch_size):
            batch = seqs[start : start + batch_size]
            opt.zero_grad(set_to_none=False)
            value = sequence_loss(model, batch)
            compute_gradients(value)
            opt.step()
            total += value.item()
            count += 1
        losses.append(total / count)
        log.debug("topology epoch %d loss %.6f", epoch, losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, losses[-1], model)
    return model, losses


@torch.no_grad()
def sample_topologies(
    model: GraphRNN, config: GraphRnnConfig, rngs: Sequence[np.random.Generator]
) -> list[Graph]:
    """Ancestral Bernoulli sampling of ``len(rngs)`` graphs in lockstep.

    Graph ``b`` consumes only ``rngs[b]``. Bits that would point before node 0
    are forced to zero. A graph stops when a sampled row is all zeros or when
    it reaches ``config.n_max`` nodes; an empty first row is redrawn.
    """
    m, n_max = config.m, config.n_max
    B = len(rngs)
    if B == 0:
        return []
    dtype = model.dtype
    hidden = [torch.zeros(B, config.graph_hidden, dtype=dtype) for _ in model.g_gru]
    x = torch.ones(B, m, dtype=dtype)
    rows: list[list[np.ndarray]] = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    if n_max < 2:
        alive[:] = False
    node = 1  # index of the node being added
    while alive.any() and node < n_max:
        idx = np.nonzero(alive)[0]
        sel = torch.from_numpy(idx)
        y, new_hidden = model.graph_level(x[sel].unsqueeze(0), [h[sel] for h in hidden])
        for h, nh in zip(hidden, new_hidden):
            h[sel] = nh
        y = y[0]
        valid = min(node, m)
        bits = _sample_rows(model, y, [rngs[b] for b in idx], m, valid)
        if node == 1:
            empty = bits.sum(axis=1) == 0
            tries = 0
            while empty.any():
                tries += 1
                if tries >= MAX_DEGENERATE_RETRIES:
                    raise ModelCollapsed(
                        f"model collapsed: {MAX_DEGENERATE_RETRIES} consecutive single-node samples"
                    )
                redo = np.nonzero(empty)[0]
                bits[redo] = _sample_rows(model, y[torch.from_numpy(redo)], [rngs[idx[r]] for r in redo], m, valid)
                empty = bits.sum(axis=1) == 0
        stop = bits.sum(axis=1) == 0
        for r, b in enumerate(idx):
            if stop[r]:
                alive[b] = False
            else:
                rows[b].append(bits[r])
        x[sel] = torch.from_numpy(bits).to(dtype)
        node += 1
    out = []
    for b in range(B):
        n = len(rows[b]) + 1
        mat = np.array(rows[b], dtype=np.uint8).reshape(n - 1, m)
        out.append(decode_banded(BandedAdjacency(mat, n, m)))
    return out


def _sample_rows(model: GraphRNN, y: torch.Tensor, rngs, m: int, valid: int) -> np.ndarray:
    R = y.shape[0]
    u = np.stack([r.random(m) for r in rngs]) if R else np.zeros((0, m))
    dtype = y.dtype
    bits = np.zeros((R, m))
    hidden = [y] + [y.new_zeros(y.shape) for _ in model.e_gru[1:]]
    inp = y.new_ones(R, 1)
    for j in range(valid):
        p, hidden = model.edge_step(inp, hidden)
        b = (u[:, j] < p.numpy()).astype(np.float64)
        bits[:, j] = b
        inp = torch.from_numpy(b).to(dtype).unsqueeze(1)
    return bits


def sample_topology(model: GraphRNN, config: GraphRnnConfig, rng: np.random.Generator) -> Graph:
    return sample_topologies(model, config, [rng])[0]
