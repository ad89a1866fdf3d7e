import math

import numpy as np
import pytest
import torch

from conftest import fd_rel_error
from dkngen.nn import (
    MLP,
    GRULayer,
    adam_step,
    bce_loss,
    compute_gradients,
    gru_cell,
    gru_layer_sequence,
    gru_stack,
    load_module_state,
    loss,
    make_optimizer,
    mlp_forward,
    module_state,
    mse_loss,
    sinusoidal_embed,
)

F64 = torch.float64


def _randomize(module, rng, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(rng.uniform(-scale, scale, tuple(p.shape))))
            p.requires_grad_(True)
    return module


# ---------------------------------------------------------------- GRU


def test_gru_zero_params_halves_state():
    layer = GRULayer(3, 4)
    h = torch.tensor([1.0, -2.0, 0.5, 4.0], dtype=F64)
    out = gru_cell(torch.randn(3, dtype=F64), h, layer)
    assert torch.allclose(out, 0.5 * h)


def test_gru_zero_fixed_point(rng):
    layer = GRULayer(3, 4, rng)
    out = gru_cell(torch.zeros(3, dtype=F64), torch.zeros(4, dtype=F64), layer)
    assert torch.equal(out, torch.zeros(4, dtype=F64))


def test_gru_cell_matches_reference_formula(rng):
    layer = _randomize(GRULayer(3, 4), rng)
    x = torch.from_numpy(rng.standard_normal(3))
    h = torch.from_numpy(rng.standard_normal(4))
    sig = lambda v: 1 / (1 + np.exp(-v))
    P = {k: v.detach().numpy() for k, v in layer.named_parameters()}
    xn, hn = x.numpy(), h.numpy()
    z = sig(P["W_z"] @ xn + P["U_z"] @ hn + P["b_z"])
    r = sig(P["W_r"] @ xn + P["U_r"] @ hn + P["b_r"])
    c = np.tanh(P["W_h"] @ xn + P["U_h"] @ (r * hn) + P["b_h"])
    assert np.allclose(gru_cell(x, h, layer).detach().numpy(), z * hn + (1 - z) * c, atol=1e-14)


def test_gru_output_bound(rng):
    for _ in range(50):
        layer = _randomize(GRULayer(3, 5), rng, scale=3.0)
        h = torch.from_numpy(rng.normal(0, 3, 5))
        out = gru_cell(torch.from_numpy(rng.normal(0, 3, 3)), h, layer)
        assert torch.all(out.abs() <= torch.maximum(h.abs(), torch.ones(5, dtype=F64)) + 1e-12)


def test_gru_dimension_mismatch():
    with pytest.raises(ValueError):
        gru_cell(torch.zeros(2, dtype=F64), torch.zeros(4, dtype=F64), GRULayer(3, 4))


def test_gru_sequence_equals_repeated_cell(rng):
    layer = _randomize(GRULayer(3, 4), rng)
    xs = torch.from_numpy(rng.standard_normal((6, 2, 3)))
    h = torch.from_numpy(rng.standard_normal((2, 4)))
    seq = gru_layer_sequence(xs, h, layer)
    for t in range(6):
        h = gru_cell(xs[t], h, layer)
        assert torch.allclose(seq[t], h, atol=1e-14)


def test_gru_stack_single_step_is_cell(rng):
    layer = _randomize(GRULayer(3, 4), rng)
    x = torch.from_numpy(rng.standard_normal((1, 3)))
    h = torch.from_numpy(rng.standard_normal(4))
    out, finals = gru_stack(x, [layer], [h])
    assert torch.allclose(out[0], gru_cell(x[0], h, layer), atol=1e-15)
    assert torch.allclose(finals[0], out[0])


def test_gru_stack_zero_params_geometric_decay():
    h = torch.tensor([2.0, -1.0], dtype=F64)
    out, _ = gru_stack(torch.zeros(5, 3, dtype=F64), [GRULayer(3, 2)], [h])
    for t in range(5):
        assert torch.allclose(out[t], 0.5 ** (t + 1) * h)


def test_gru_stack_layer_count_mismatch():
    with pytest.raises(ValueError):
        gru_stack(torch.zeros(2, 3, dtype=F64), [GRULayer(3, 2)], [])


def test_gru_cell_gradients(rng):
    for _ in range(20):
        layer = _randomize(GRULayer(3, 4), rng)
        x = torch.from_numpy(rng.standard_normal(3)).requires_grad_()
        h = torch.from_numpy(rng.standard_normal(4)).requires_grad_()
        err = fd_rel_error(lambda: gru_cell(x, h, layer).sum(), [x, h, *layer.parameters()])
        assert err <= 1e-5


def test_gru_stack_gradients(rng):
    for _ in range(20):
        layers = [_randomize(GRULayer(3, 4), rng)] + [_randomize(GRULayer(4, 4), rng) for _ in range(3)]
        xs = torch.from_numpy(rng.standard_normal((5, 3))).requires_grad_()
        h0 = [torch.from_numpy(rng.standard_normal(4)).requires_grad_() for _ in range(4)]
        params = [p for l in layers for p in l.parameters()]
        err = fd_rel_error(lambda: gru_stack(xs, layers, h0)[0].sum(), [xs, *h0, *params])
        assert err <= 1e-5


# ---------------------------------------------------------------- MLP


def test_mlp_identity_and_relu():
    m = MLP(2, 2, "none")
    with torch.no_grad():
        m.weight.copy_(torch.eye(2, dtype=F64))
    x = torch.tensor([-1.0, 2.0], dtype=F64)
    assert torch.equal(mlp_forward(x, m), x)
    m.activation = "relu"
    assert mlp_forward(x, m).tolist() == [0.0, 2.0]


def test_mlp_zero_sigmoid_is_half():
    assert torch.equal(mlp_forward(torch.ones(3, dtype=F64), MLP(3, 4, "sigmoid")), torch.full((4,), 0.5, dtype=F64))


def test_mlp_errors():
    with pytest.raises(ValueError):
        MLP(2, 2, "tanh")
    with pytest.raises(ValueError):
        mlp_forward(torch.zeros(3, dtype=F64), MLP(2, 2))


@pytest.mark.parametrize("act", ["relu", "sigmoid", "none"])
def test_mlp_gradients(rng, act):
    for _ in range(20):
        m = _randomize(MLP(4, 3, act), rng)
        # keep relu pre-activations away from the kink
        x = torch.from_numpy(rng.standard_normal((5, 4))).requires_grad_()
        if act == "relu":
            pre = (x @ m.weight.T + m.bias).detach()
            if pre.abs().min() < 1e-3:
                continue
        err = fd_rel_error(lambda: (mlp_forward(x, m) ** 2).sum(), [x, *m.parameters()])
        assert err <= 1e-5


def test_init_bounds_and_determinism():
    a = MLP(9, 5, rng=np.random.default_rng(3))
    b = MLP(9, 5, rng=np.random.default_rng(3))
    assert torch.equal(a.weight, b.weight)
    assert a.weight.abs().max() <= 1 / 3
    assert torch.equal(a.bias, torch.zeros(5, dtype=F64))


# ---------------------------------------------------------------- embedding


def test_embed_t0_alternates():
    e = sinusoidal_embed(0, 8)
    assert e.tolist() == [0.0, 1.0] * 4


def test_embed_formula():
    e = sinusoidal_embed(37, 6)
    for i in range(3):
        w = 37 / 10000 ** (2 * i / 6)
        assert e[2 * i].item() == pytest.approx(math.sin(w), abs=1e-15)
        assert e[2 * i + 1].item() == pytest.approx(math.cos(w), abs=1e-15)


def test_embed_distinct_and_bounded():
    e = sinusoidal_embed(torch.arange(2400), 16).numpy()
    assert np.all(np.abs(e) <= 1)
    # pairwise distinctness: the smallest distance between any two rows is positive
    sq = (e**2).sum(1)
    dist2 = sq[:, None] + sq[None, :] - 2 * e @ e.T
    np.fill_diagonal(dist2, np.inf)
    assert dist2.min() > 1e-8


def test_embed_errors():
    with pytest.raises(ValueError):
        sinusoidal_embed(1, 5)
    with pytest.raises(ValueError):
        sinusoidal_embed(3000, 8, t_max=2400)


# ---------------------------------------------------------------- losses and gradients


def test_bce_half_is_ln2(rng):
    y = torch.from_numpy(rng.integers(0, 2, 10).astype(float))
    assert bce_loss(torch.full((10,), 0.5, dtype=F64), y).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_clamped_never_nan():
    v = bce_loss(torch.tensor([0.0, 1.0], dtype=F64), torch.tensor([1.0, 0.0], dtype=F64))
    assert math.isfinite(v.item()) and v.item() == pytest.approx(-math.log(1e-12), rel=1e-6)


def test_bce_gradient_closed_form(rng):
    p = torch.from_numpy(rng.uniform(0.05, 0.95, 7)).requires_grad_()
    y = torch.from_numpy(rng.integers(0, 2, 7).astype(float))
    bce_loss(p, y).backward()
    expect = (p - y) / (p * (1 - p)) / 7
    assert torch.allclose(p.grad, expect.detach(), atol=1e-14)
    assert fd_rel_error(lambda: bce_loss(p, y), [p]) <= 1e-6


def test_mse_and_dispatch():
    y = torch.tensor([1.0, 2.0], dtype=F64)
    assert mse_loss(y, y).item() == 0.0
    assert loss("mse", y, torch.zeros(2, dtype=F64)).item() == 2.5
    with pytest.raises(ValueError):
        loss("huber", y, y)
    with pytest.raises(ValueError):
        mse_loss(y, torch.zeros(3, dtype=F64))


def test_losses_nonnegative(rng):
    for _ in range(50):
        p = torch.from_numpy(rng.uniform(0, 1, 5))
        y = torch.from_numpy(rng.integers(0, 2, 5).astype(float))
        assert bce_loss(p, y).item() >= 0 and mse_loss(p, y).item() >= 0


def test_compute_gradients_linear_and_quadratic(rng):
    p = torch.from_numpy(rng.standard_normal(4)).requires_grad_()
    compute_gradients(p.sum())
    assert torch.equal(p.grad, torch.ones(4, dtype=F64))
    p.grad = None
    compute_gradients((p * p).sum())
    assert torch.allclose(p.grad, 2 * p.detach())
    # a second call accumulates
    compute_gradients((p * p).sum())
    assert torch.allclose(p.grad, 4 * p.detach())


def test_compute_gradients_detached_errors():
    with pytest.raises(RuntimeError, match="detached"):
        compute_gradients(torch.tensor(1.0))


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_fixed():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=F64))
    opt = make_optimizer([p])
    p.grad = torch.zeros(2, dtype=F64)
    adam_step(opt)
    assert p.tolist() == [1.0, -2.0]


def test_adam_first_step_closed_form():
    p = torch.nn.Parameter(torch.tensor([1.0, 1.0, 1.0], dtype=F64))
    g = torch.tensor([0.3, -5.0, 2e-3], dtype=F64)
    opt = make_optimizer([p], lr=1e-3)
    p.grad = g.clone()
    adam_step(opt)
    # bias-corrected m/sqrt(v) = g/|g| up to eps
    expect = 1.0 - 1e-3 * g / (g.abs() + 1e-8)
    assert torch.allclose(p.detach(), expect, atol=1e-15)


def test_adam_converges_on_quadratic():
    w = torch.nn.Parameter(torch.tensor([1.0, 1.0], dtype=F64))
    opt = make_optimizer([w], lr=1e-2)
    for _ in range(200):
        compute_gradients((w**2).sum())
        adam_step(opt)
    assert w.norm().item() < 0.1


# ---------------------------------------------------------------- state


def test_module_state_roundtrip(rng):
    a = MLP(3, 2, rng=rng)
    b = MLP(3, 2)
    load_module_state(b, dict(module_state(a)))
    assert torch.equal(a.weight, b.weight)


def test_load_state_reports_mismatches():
    with pytest.raises(ValueError) as info:
        load_module_state(MLP(3, 2), {"weight": np.zeros((2, 4)), "extra": np.zeros(1)})
    msg = str(info.value)
    assert "missing parameters: bias" in msg and "unexpected parameters: extra" in msg and "weight" in msg
