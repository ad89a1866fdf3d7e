"""Small neural-network kernel shared by both generative models.

Gradients come from torch autograd; the layer algebra (GRU gates, MLPs,
losses, timestep embedding) is written out explicitly here.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

__all__ = [
    "DTYPE",
    "uniform_init",
    "GRULayer",
    "gru_cell",
    "gru_layer_sequence",
    "gru_stack",
    "MLP",
    "mlp_forward",
    "sinusoidal_embed",
    "bce_loss",
    "mse_loss",
    "loss",
    "compute_gradients",
    "make_optimizer",
    "adam_step",
    "module_dtype",
    "module_state",
    "load_module_state",
    "BCE_EPS",
]

DTYPE = torch.float64
BCE_EPS = 1e-12


def uniform_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator | None, dtype=DTYPE) -> torch.Tensor:
    """Uniform in +-1/sqrt(fan_in); zeros when ``rng`` is None."""
    if rng is None:
        return torch.zeros(tuple(shape), dtype=dtype)
    bound = 1.0 / math.sqrt(fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=tuple(shape))).to(dtype)


def _zeros(*shape, dtype=DTYPE) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=dtype))


class GRULayer(nn.Module):
    """One GRU layer holding the nine gate parameters."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None, dtype=DTYPE):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        e, d = hidden_dim, input_dim
        for gate in "zrh":
            setattr(self, f"W_{gate}", nn.Parameter(uniform_init((e, d), d, rng, dtype)))
            setattr(self, f"U_{gate}", nn.Parameter(uniform_init((e, e), e, rng, dtype)))
            setattr(self, f"b_{gate}", _zeros(e, dtype=dtype))

    def forward(self, x: torch.Tensor, h_prev: torch.Tensor) -> torch.Tensor:
        return gru_cell(x, h_prev, self)


def _check(x: torch.Tensor, dim: int, what: str):
    if x.shape[-1] != dim:
        raise ValueError(f"{what}: expected trailing dimension {dim}, got {tuple(x.shape)}")


def gru_cell(x: torch.Tensor, h_prev: torch.Tensor, p: GRULayer) -> torch.Tensor:
    """h_t = z*h_prev + (1-z)*tanh(W_h x + U_h (r*h_prev) + b_h)."""
    _check(x, p.input_dim, "gru_cell input")
    _check(h_prev, p.hidden_dim, "gru_cell hidden")
    z = torch.sigmoid(x @ p.W_z.T + h_prev @ p.U_z.T + p.b_z)
    r = torch.sigmoid(x @ p.W_r.T + h_prev @ p.U_r.T + p.b_r)
    cand = torch.tanh(x @ p.W_h.T + (r * h_prev) @ p.U_h.T + p.b_h)
    return z * h_prev + (1 - z) * cand


def gru_layer_sequence(x_seq: torch.Tensor, h0: torch.Tensor, p: GRULayer) -> torch.Tensor:
    """Run one layer over ``x_seq`` of shape ``(T, ..., d)``; returns all hidden states.

    Same algebra as :func:`gru_cell`, with the input projections of every
    timestep batched into one product.
    """
    _check(x_seq, p.input_dim, "gru input")
    _check(h0, p.hidden_dim, "gru hidden")
    gzr = (x_seq @ torch.cat([p.W_z, p.W_r]).T + torch.cat([p.b_z, p.b_r])).unbind(0)
    gh = (x_seq @ p.W_h.T + p.b_h).unbind(0)
    u_zr = torch.cat([p.U_z, p.U_r]).T
    u_h = p.U_h.T
    h = h0
    out = []
    for t in range(x_seq.shape[0]):
        z, r = torch.sigmoid(gzr[t] + h @ u_zr).chunk(2, dim=-1)
        cand = torch.tanh(gh[t] + (r * h) @ u_h)
        h = z * h + (1 - z) * cand
        out.append(h)
    return torch.stack(out)


def gru_stack(
    x_seq: torch.Tensor, layers: Sequence[GRULayer], h0: Sequence[torch.Tensor]
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Stacked recurrence; returns top-layer outputs and each layer's final state."""
    if len(h0) != len(layers):
        raise ValueError(f"{len(layers)} layers but {len(h0)} initial states")
    out = x_seq
    finals = []
    for layer, h in zip(layers, h0):
        out = gru_layer_sequence(out, h, layer)
        finals.append(out[-1])
    return out, finals


_ACTIVATIONS = {
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "none": lambda v: v,
}


class MLP(nn.Module):
    """Single affine layer followed by an activation."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        activation: str = "relu",
        rng: np.random.Generator | None = None,
        bias: bool = True,
        dtype=DTYPE,
    ):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation
        self.weight = nn.Parameter(uniform_init((out_dim, in_dim), in_dim, rng, dtype))
        self.bias = _zeros(out_dim, dtype=dtype) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(x, self)


def mlp_forward(x: torch.Tensor, p: MLP) -> torch.Tensor:
    _check(x, p.in_dim, "mlp input")
    y = x @ p.weight.T
    if p.bias is not None:
        y = y + p.bias
    return _ACTIVATIONS[p.activation](y)


def sinusoidal_embed(t, dim: int, t_max: int | None = None, dtype=DTYPE) -> torch.Tensor:
    """Transformer-style embedding; ``t`` may be an int or an integer tensor.

    Component ``2i`` is ``sin(t / 10000**(2i/dim))`` and ``2i+1`` the cosine.
    """
    if dim <= 0 or dim % 2:
        raise ValueError("embedding dimension must be a positive even integer")
    t = torch.as_tensor(t, dtype=torch.float64)
    if t_max is not None and bool((t < 0).any() or (t > t_max).any()):
        raise ValueError(f"timestep outside [0, {t_max}]")
    freqs = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    ang = t[..., None] * freqs
    out = torch.empty(*ang.shape[:-1], dim, dtype=torch.float64)
    out[..., 0::2] = torch.sin(ang)
    out[..., 1::2] = torch.cos(ang)
    return out.to(dtype)


def bce_loss(p: torch.Tensor, y: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """Mean binary cross-entropy with predictions clamped to ``[1e-12, 1-1e-12]``.

    ``weight`` (0/1) restricts the mean to selected entries.
    """
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    terms = -(y * torch.log(p) + (1 - y) * torch.log1p(-p))
    if weight is None:
        return terms.mean()
    return (terms * weight).sum() / weight.sum()


def mse_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    return ((p - y) ** 2).mean()


def loss(kind: str, prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if kind == "bce":
        return bce_loss(prediction, target)
    if kind == "mse":
        return mse_loss(prediction, target)
    raise ValueError(f"unknown loss {kind!r}")


def compute_gradients(loss_value: torch.Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable parameter."""
    if not isinstance(loss_value, torch.Tensor) or not loss_value.requires_grad:
        raise RuntimeError("backward on a detached value")
    if loss_value.numel() != 1:
        raise ValueError("loss must be a scalar")
    loss_value.backward()


def make_optimizer(params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def adam_step(optimizer: torch.optim.Optimizer, zero_grad: bool = True) -> None:
    optimizer.step()
    if zero_grad:
        optimizer.zero_grad(set_to_none=False)


def module_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def module_state(module: nn.Module) -> list[tuple[str, np.ndarray]]:
    return [(name, p.detach().cpu().numpy().copy()) for name, p in module.named_parameters()]


def load_module_state(module: nn.Module, params: dict[str, np.ndarray]) -> None:
    """Copy named arrays into ``module``; names and shapes must match exactly."""
    own = dict(module.named_parameters())
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    problems = []
    if missing:
        problems.append(f"missing parameters: {', '.join(missing)}")
    if extra:
        problems.append(f"unexpected parameters: {', '.join(extra)}")
    for name in sorted(set(own) & set(params)):
        if tuple(own[name].shape) != tuple(params[name].shape):
            problems.append(
                f"{name}: shape {tuple(params[name].shape)} != expected {tuple(own[name].shape)}"
            )
    if problems:
        raise ValueError("checkpoint does not match architecture: " + "; ".join(problems))
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(torch.from_numpy(np.asarray(params[name])).to(p.dtype))
