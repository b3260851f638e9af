"""Parameter containers and transformer building blocks on top of :mod:`lrvq.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    """Holds parameters and sub-modules as attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in, dtype)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64):
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    """Multi-head attention with separate query and key/value inputs.

    ``query`` is ``[B, Lq, D]`` and ``context`` is ``[B, Lk, D]``;
    ``bias`` broadcasts against the ``[B, H, Lq, Lk]`` score tensor.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float64, d_ctx: int | None = None):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        d_ctx = d_ctx or d
        self.heads = heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d_ctx, d, rng, dtype)
        self.v = Linear(d_ctx, d, rng, dtype)
        self.out = Linear(d, d, rng, dtype)

    def _split(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        return x.reshape(B, L, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, context: Tensor, bias=None) -> Tensor:
        B, L, D = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        att = T.scaled_dot_product_attention(q, k, v, bias)
        return self.out(att.transpose(0, 2, 1, 3).reshape(B, L, D))


class FeedForward(Module):
    """Pre-norm residual MLP."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.norm = LayerNorm(d, dtype)
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.fc2(T.gelu(self.fc1(self.norm(x))))


class TemporalAttention(Module):
    """Self-attention across the time axis of ``[S, N, L, D]``, one sequence per agent."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        self.norm = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        S, N, L, D = x.shape
        h = self.norm(x).reshape(S * N, L, D)
        return x + self.attn(h, h).reshape(S, N, L, D)


class SocialAttention(Module):
    """Self-attention across agents at each time step of ``[S, N, L, D]``.

    ``agent_bias`` is a ``[S, N]`` array holding 0 for real agents and a large
    negative value for padding, so padded agents are never attended to.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        self.norm = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype)

    def __call__(self, x: Tensor, agent_bias: np.ndarray) -> Tensor:
        S, N, L, D = x.shape
        h = self.norm(x).transpose(0, 2, 1, 3).reshape(S * L, N, D)
        bias = np.repeat(agent_bias.astype(x.dtype), L, axis=0)[:, None, None, :]
        out = self.attn(h, h, bias).reshape(S, L, N, D).transpose(0, 2, 1, 3)
        return x + out


class CrossAttention(Module):
    """Residual cross-attention from ``[S, N, L, D]`` tokens to ``[S, N, Lc, D]`` context, per agent."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float64, d_ctx: int | None = None):
        d_ctx = d_ctx or d
        self.norm = LayerNorm(d, dtype)
        self.norm_ctx = LayerNorm(d_ctx, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype, d_ctx)

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        S, N, L, D = x.shape
        q = self.norm(x).reshape(S * N, L, D)
        kv = self.norm_ctx(ctx).reshape(S * N, ctx.shape[2], ctx.shape[3])
        return x + self.attn(q, kv).reshape(S, N, L, D)


def agent_bias(mask: np.ndarray) -> np.ndarray:
    """Additive attention bias from a boolean ``[S, N]`` agent mask."""
    return np.where(mask, 0.0, NEG_INF)
