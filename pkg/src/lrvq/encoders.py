"""Social-temporal transformers for context encoding, future encoding and decoding.

All three networks take tensors laid out as ``[S, N, L, ·]`` (scenes, agents,
time steps, features) plus a boolean ``[S, N]`` agent mask. Temporal
attention mixes the steps of one agent; social attention mixes the agents of
one scene at a given step, so it is permutation-equivariant over agents.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .config import ModelConfig, np_dtype
from .tensor import Tensor


class _Stack(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, cross: bool):
        dt = np_dtype(cfg)
        D, H = cfg.d_model, cfg.heads
        self.social = cfg.social
        self.temporal = [nn.TemporalAttention(D, H, rng, dt) for _ in range(cfg.depth)]
        self.cross = [nn.CrossAttention(D, H, rng, dt) for _ in range(cfg.depth)] if cross else []
        self.social_blocks = [nn.SocialAttention(D, H, rng, dt) for _ in range(cfg.depth)] if cfg.social else []
        self.ff = [nn.FeedForward(D, cfg.ff_width, rng, dt) for _ in range(cfg.depth)]

    def __call__(self, x: Tensor, mask: np.ndarray, ctx: Tensor | None = None) -> Tensor:
        bias = nn.agent_bias(mask)
        for i in range(len(self.temporal)):
            x = self.temporal[i](x)
            if self.cross:
                x = self.cross[i](x, ctx)
            if self.social:
                x = self.social_blocks[i](x, bias)
            x = self.ff[i](x)
        return x


class ContextEncoder(nn.Module):
    """Past trajectories of every agent in the scene -> ``h_ctx`` of shape ``[S, N, Tp, D]``."""

    def __init__(self, cfg: ModelConfig, past_len: int, rng: np.random.Generator):
        dt = np_dtype(cfg)
        self.embed = nn.Linear(2, cfg.d_model, rng, dt)
        self.pos = nn.uniform_init(rng, (past_len, cfg.d_model), cfg.d_model, dt)
        self.blocks = _Stack(cfg, rng, cross=False)
        self.norm = nn.LayerNorm(cfg.d_model, dt)

    def __call__(self, past, mask: np.ndarray) -> Tensor:
        x = self.embed(Tensor(past, dtype=self.pos.dtype) if not isinstance(past, Tensor) else past) + self.pos
        return self.norm(self.blocks(x, mask))


class FutureEncoder(nn.Module):
    """Future trajectories -> continuous latents ``z`` of shape ``[S, N, T, code_dim]``.

    Queries of the cross-attention sublayers come from the future tokens;
    keys and values come from ``h_ctx`` of the same agent.
    """

    def __init__(self, cfg: ModelConfig, future_len: int, code_dim: int, rng: np.random.Generator):
        dt = np_dtype(cfg)
        self.embed = nn.Linear(2, cfg.d_model, rng, dt)
        self.pos = nn.uniform_init(rng, (future_len, cfg.d_model), cfg.d_model, dt)
        self.blocks = _Stack(cfg, rng, cross=True)
        self.norm = nn.LayerNorm(cfg.d_model, dt)
        self.head = nn.Linear(cfg.d_model, code_dim, rng, dt)

    def __call__(self, future, h_ctx: Tensor, mask: np.ndarray) -> Tensor:
        x = self.embed(Tensor(future, dtype=self.pos.dtype) if not isinstance(future, Tensor) else future) + self.pos
        return self.head(self.norm(self.blocks(x, mask, h_ctx)))


class Decoder(nn.Module):
    """Quantized latents of all agents in a scene -> future offsets ``[S, N, T, 2]``."""

    def __init__(self, cfg: ModelConfig, future_len: int, code_dim: int, rng: np.random.Generator):
        dt = np_dtype(cfg)
        self.embed = nn.Linear(code_dim, cfg.d_model, rng, dt)
        self.pos = nn.uniform_init(rng, (future_len, cfg.d_model), cfg.d_model, dt)
        self.blocks = _Stack(cfg, rng, cross=False)
        self.norm = nn.LayerNorm(cfg.d_model, dt)
        self.head = nn.Linear(cfg.d_model, 2, rng, dt)

    def __call__(self, z_q: Tensor, mask: np.ndarray) -> Tensor:
        x = self.embed(z_q) + self.pos
        return self.head(self.norm(self.blocks(x, mask)))
