import math

import numpy as np
import pytest
import torch

from conftest import fd_rel_error, grid_graph, path_graph
from dkngen.graph import DatasetSpec, Graph, build_dataset
from dkngen.graphrnn import (
    GraphRNN,
    GraphRnnConfig,
    ModelCollapsed,
    TrainingSequence,
    graph_to_training_sequences,
    graphrnn_forward,
    sample_topologies,
    sample_topology,
    sequence_loss,
    train_topology,
)
from dkngen.nn import bce_loss

SMALL = dict(graph_layers=2, graph_hidden=5, graph_gru_in=4, graph_out1=3, graph_out2=4, edge_layers=2, edge_gru_in=3, edge_out1=3)


def _cycle(n: int) -> Graph:
    ang = 2 * np.pi * np.arange(n) / n
    return Graph(np.column_stack([np.cos(ang), np.sin(ang)]), [(i, (i + 1) % n) for i in range(n)])


def _random_model(config, rng, scale=0.5):
    model = GraphRNN(config, dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.from_numpy(rng.uniform(-scale, scale, tuple(p.shape))))
    return model


# ---------------------------------------------------------------- configuration


def test_default_architecture_shapes():
    model = GraphRNN(GraphRnnConfig(m=8, n_max=48), np.random.default_rng(0))
    shapes = {k: tuple(v.shape) for k, v in model.named_parameters()}
    assert shapes["g_in.weight"] == (64, 8)
    assert shapes["g_gru.0.W_z"] == (48, 64) and shapes["g_gru.3.U_h"] == (48, 48)
    assert shapes["g_out1.weight"] == (16, 48) and shapes["g_out2.weight"] == (32, 16)
    assert shapes["e_in.weight"] == (24, 1)
    assert shapes["e_gru.0.W_r"] == (32, 24) and shapes["e_gru.3.U_z"] == (32, 32)
    assert shapes["e_out1.weight"] == (36, 32) and shapes["e_out2.weight"] == (1, 36)
    assert len(model.g_gru) == 4 and len(model.e_gru) == 4
    assert model.e_out2.activation == "sigmoid"
    assert model.g_out2.activation == "relu"


def test_config_roundtrip_and_validation():
    c = GraphRnnConfig(m=3, n_max=10, **SMALL)
    assert GraphRnnConfig.from_dict({k: str(v) for k, v in c.as_dict().items()}) == c
    with pytest.raises(ValueError):
        GraphRnnConfig(m=0, n_max=10)


# ---------------------------------------------------------------- sequences


def test_sequences_path():
    seq = graph_to_training_sequences(path_graph(3), 2, np.random.default_rng(0))
    # any BFS of a 3-path is either endpoint-rooted or middle-rooted
    assert seq.inputs[0].tolist() == [1, 1]
    assert seq.targets.tolist() in ([[1, 0], [1, 0]], [[1, 0], [0, 1]])
    assert np.array_equal(seq.inputs[1:], seq.targets[:-1])


def test_sequences_path_endpoint_ordering():
    from dkngen.graph import encode_banded
    from dkngen.graphrnn import sequence_from_banded

    seq = sequence_from_banded(encode_banded(path_graph(3), np.arange(3), 2))
    assert seq.inputs.tolist() == [[1, 1], [1, 0]]
    assert seq.targets.tolist() == [[1, 0], [1, 0]]


def test_sequences_single_edge_and_triangle():
    seq = graph_to_training_sequences(path_graph(2), 1, np.random.default_rng(0))
    assert seq.inputs.tolist() == [[1]] and seq.targets.tolist() == [[1]]
    tri = Graph(np.zeros((3, 2)), [(0, 1), (1, 2), (0, 2)])
    assert graph_to_training_sequences(tri, 2, np.random.default_rng(1)).targets.tolist() == [[1, 0], [1, 1]]


def test_stop_row_appended():
    seq = graph_to_training_sequences(path_graph(2), 1, np.random.default_rng(0)).with_stop_row()
    assert seq.inputs.tolist() == [[1], [1]] and seq.targets.tolist() == [[1], [0]]


def test_sequences_bandwidth_retry_exhausted():
    star = Graph(np.zeros((6, 2)), [(0, i) for i in range(1, 6)])
    with pytest.raises(Exception, match="bandwidth exceeded"):
        graph_to_training_sequences(star, 2, np.random.default_rng(0))


# ---------------------------------------------------------------- forward


def test_zero_params_give_half():
    model = GraphRNN(GraphRnnConfig(m=3, n_max=10))
    seq = graph_to_training_sequences(grid_graph(3, 3), 3 * 2, np.random.default_rng(0))
    model = GraphRNN(GraphRnnConfig(m=6, n_max=10))
    p = graphrnn_forward(seq, model)
    assert torch.equal(p, torch.full_like(p, 0.5))


def test_smallest_case_one_probability():
    model = GraphRNN(GraphRnnConfig(m=1, n_max=3), np.random.default_rng(0))
    p = graphrnn_forward(TrainingSequence(np.ones((1, 1)), np.ones((1, 1))), model)
    assert p.shape == (1, 1) and 0 < p.item() < 1


def test_forward_is_causal_in_teacher_bits(rng):
    """Changing target bit (i, j) only affects probabilities after it."""
    config = GraphRnnConfig(m=3, n_max=10, **SMALL)
    model = _random_model(config, rng)
    seq = graph_to_training_sequences(grid_graph(2, 3), 3, rng)
    base = graphrnn_forward(seq, model).detach()
    i, j = 1, 0
    targets = seq.targets.copy()
    targets[i, j] = 1 - targets[i, j]
    inputs = np.vstack([seq.inputs[:1], targets[:-1]])
    changed = graphrnn_forward(TrainingSequence(inputs, targets), model).detach()
    diff = (base != changed).numpy()
    assert not diff[:i].any() and not diff[i, : j + 1].any()
    assert diff[i, j + 1 :].any() or diff[i + 1 :].any()


def test_batched_loss_equals_per_sequence(rng):
    config = GraphRnnConfig(m=4, n_max=20, **SMALL)
    model = _random_model(config, rng)
    seqs = [graph_to_training_sequences(g, 4, rng) for g in build_dataset(grid_graph(4, 4), DatasetSpec(5, 8, 2, 3))]
    rows = sum(len(s.targets) for s in seqs)
    manual = sum(bce_loss(graphrnn_forward(s, model), torch.from_numpy(s.targets)) * len(s.targets) for s in seqs) / rows
    assert sequence_loss(model, seqs).item() == pytest.approx(manual.item(), rel=1e-12)


def test_forward_gradients_reduced_config(rng):
    config = GraphRnnConfig(m=3, n_max=10, **SMALL)
    for _ in range(20):
        model = _random_model(config, rng)
        g = build_dataset(grid_graph(3, 3), DatasetSpec(1, 6, 1, int(rng.integers(1 << 30))))[0]
        seq = graph_to_training_sequences(g, 4, rng).with_stop_row()
        model = _random_model(GraphRnnConfig(m=4, n_max=10, **SMALL), rng)
        err = fd_rel_error(lambda: sequence_loss(model, [seq]), list(model.parameters()))
        assert err <= 1e-4


def test_forward_gradients_full_size_sampled(rng):
    config = GraphRnnConfig(m=6, n_max=20)
    model = _random_model(config, rng, scale=0.2)
    seq = graph_to_training_sequences(grid_graph(3, 4), 6, rng).with_stop_row()
    err = fd_rel_error(lambda: sequence_loss(model, [seq]), list(model.parameters()), max_entries=6, rng=rng)
    assert err <= 1e-4


# ---------------------------------------------------------------- training


def test_initial_loss_near_ln2():
    ds = build_dataset(grid_graph(6, 6), DatasetSpec(20, 12, 2, 0))
    config = GraphRnnConfig(m=8, n_max=30)
    model = GraphRNN(config, np.random.default_rng(1))
    seqs = [graph_to_training_sequences(g, 8, np.random.default_rng(i)).with_stop_row() for i, g in enumerate(ds)]
    assert abs(sequence_loss(model, seqs).item() - math.log(2)) < 0.05


def test_single_edge_dataset_learns_edge_and_stop():
    ds = [path_graph(2)] * 32
    config = GraphRnnConfig(m=1, n_max=5)
    model, losses = train_topology(ds, config, 60, 0, batch_size=8, dtype=torch.float64)
    assert losses[-1] < losses[0]
    inputs = np.array([[1.0], [1.0]])
    targets = np.array([[1.0], [0.0]])
    p = graphrnn_forward(TrainingSequence(inputs, targets), model).detach().numpy()
    assert p[0, 0] >= 0.95 and p[1, 0] <= 0.05


def test_training_is_deterministic():
    ds = build_dataset(grid_graph(5, 5), DatasetSpec(10, 8, 1, 0))
    config = GraphRnnConfig(m=5, n_max=12, **SMALL)
    a, la = train_topology(ds, config, 3, 11)
    b, lb = train_topology(ds, config, 3, 11)
    assert la == lb
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_training_resume_matches_continuous():
    ds = build_dataset(grid_graph(5, 5), DatasetSpec(10, 8, 1, 0))
    config = GraphRnnConfig(m=5, n_max=12, **SMALL)
    _, full = train_topology(ds, config, 4, 5, dtype=torch.float64)
    model, first = train_topology(ds, config, 2, 5, dtype=torch.float64)
    _, rest = train_topology(ds, config, 4, 5, model=model, start_epoch=2, dtype=torch.float64)
    # optimizer moments restart, so only the first half is identical
    assert first == full[:2] and len(rest) == 2


def test_grid_loss_halves():
    ds = build_dataset(grid_graph(8, 8), DatasetSpec(64, 12, 2, 4))
    config = GraphRnnConfig(m=8, n_max=24)
    _, losses = train_topology(ds, config, 40, 0, batch_size=16)
    assert losses[-1] < 0.5 * losses[0]


def test_four_cycles_learned():
    ds = [_cycle(4)] * 64
    config = GraphRnnConfig(m=2, n_max=8)
    model, _ = train_topology(ds, config, 80, 1, batch_size=8)
    samples = sample_topologies(model, config, [np.random.default_rng([3, i]) for i in range(200)])
    c4 = sum(g.n == 4 and g.n_edges == 4 and set(g.degrees().tolist()) == {2} for g in samples)
    assert c4 >= 160


# ---------------------------------------------------------------- sampling


def _forced_model(config, logit):
    model = GraphRNN(config)
    with torch.no_grad():
        model.e_out2.bias.fill_(logit)
    return model


def test_sampling_p_one_builds_maximal_band():
    config = GraphRnnConfig(m=3, n_max=7)
    g = sample_topology(_forced_model(config, 100.0), config, np.random.default_rng(0))
    assert g.n == 7
    expected = {(j, i) for i in range(1, 7) for j in range(max(0, i - 3), i)}
    assert set(map(tuple, g.edges.tolist())) == expected


def test_sampling_p_zero_collapses():
    config = GraphRnnConfig(m=2, n_max=7)
    with pytest.raises(ModelCollapsed, match="model collapsed"):
        sample_topology(_forced_model(config, -100.0), config, np.random.default_rng(0))


def test_samples_connected_and_bounded(rng):
    config = GraphRnnConfig(m=4, n_max=15, **SMALL)
    model = _random_model(config, rng, scale=1.0)
    with torch.no_grad():
        model.e_out2.bias.fill_(0.5)
    for g in sample_topologies(model, config, [np.random.default_rng([9, i]) for i in range(100)]):
        assert 2 <= g.n <= config.n_max and g.is_connected()
        has_back = np.zeros(g.n, bool)
        has_back[g.edges[:, 1]] = True
        assert has_back[1:].all()


def test_batch_sampling_equals_individual(rng):
    config = GraphRnnConfig(m=3, n_max=12, **SMALL)
    model = _random_model(config, rng, scale=1.0)
    batch = sample_topologies(model, config, [np.random.default_rng([1, i]) for i in range(10)])
    for i, g in enumerate(batch):
        single = sample_topology(model, config, np.random.default_rng([1, i]))
        assert np.array_equal(single.edges, g.edges) and single.n == g.n


def test_sampling_empty_request():
    config = GraphRnnConfig(m=2, n_max=5)
    assert sample_topologies(GraphRNN(config), config, []) == []
