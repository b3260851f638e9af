"""Codebooks, nearest-neighbour quantization and the first-stage VQ loss.

Three codebook modes share one interface, ``codebook(h_ctx, lam) -> e_c``:

* ``static``: ``e_c = l2_norm(e)``, the same table for every instance.
* ``full_rank``: a cross-attention module reads ``h_ctx`` and emits all
  ``C x D`` entries itself.
* ``low_rank``: ``e_c = l2_norm(e) + lam * l2_norm(xi)`` with
  ``xi = (B_ctx A)^T`` and ``B_ctx = f(B, h_ctx)``, so the per-instance
  adjustment has rank at most ``r``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .config import CodebookConfig, ConfigError, ModelConfig, np_dtype
from .tensor import Tensor


class LowRankAdapter(nn.Module):
    """Learnable tokens ``B`` (width x r), their context-conditioned version, and ``A`` (r x C)."""

    def __init__(self, width: int, rank: int, codes: int, model: ModelConfig, rng: np.random.Generator):
        dt = np_dtype(model)
        self.B = nn.uniform_init(rng, (width, rank), width, dt)
        self.A = nn.uniform_init(rng, (rank, codes), rank, dt)
        self.attend = nn.CrossAttention(width, _heads_for(width, model.heads), rng, dt, d_ctx=model.d_model)
        self.ff = nn.FeedForward(width, model.ff_width, rng, dt)

    def conditioned_tokens(self, h_ctx: Tensor) -> Tensor:
        """``B_ctx`` laid out as ``[S, N, width, r]``."""
        S, N = h_ctx.shape[:2]
        width, rank = self.B.shape
        tokens = T.broadcast_to(self.B.transpose(1, 0), (S, N, rank, width))
        tokens = self.ff(self.attend(tokens, h_ctx))
        return tokens.transpose(0, 1, 3, 2)

    def delta(self, h_ctx: Tensor) -> Tensor:
        """Instance codebook ``xi`` as ``[S, N, C, width]``."""
        return (self.conditioned_tokens(h_ctx) @ self.A).transpose(0, 1, 3, 2)


class FullRankGenerator(nn.Module):
    """Emits every codebook entry from ``h_ctx`` via C learned query tokens."""

    def __init__(self, width: int, codes: int, model: ModelConfig, rng: np.random.Generator):
        dt = np_dtype(model)
        self.queries = nn.uniform_init(rng, (codes, width), width, dt)
        self.attend = nn.CrossAttention(width, _heads_for(width, model.heads), rng, dt, d_ctx=model.d_model)
        self.ff = nn.FeedForward(width, model.ff_width, rng, dt)
        self.out = nn.Linear(width, width, rng, dt)

    def __call__(self, h_ctx: Tensor) -> Tensor:
        S, N = h_ctx.shape[:2]
        q = T.broadcast_to(self.queries, (S, N) + self.queries.shape)
        return self.out(self.ff(self.attend(q, h_ctx)))


def _heads_for(width: int, heads: int) -> int:
    return heads if width % heads == 0 else 1


class Codebook(nn.Module):
    def __init__(self, cfg: CodebookConfig, model: ModelConfig, rng: np.random.Generator):
        cfg.validate(model.d_model)
        self.mode = cfg.mode
        self.codes = cfg.codes
        self.width = cfg.code_dim or model.d_model
        dt = np_dtype(model)
        self.embedding = nn.uniform_init(rng, (self.codes, self.width), self.width, dt)
        self.adapter = LowRankAdapter(self.width, cfg.rank, cfg.codes, model, rng) if cfg.mode == "low_rank" else None
        self.generator = FullRankGenerator(self.width, cfg.codes, model, rng) if cfg.mode == "full_rank" else None

    def __call__(self, h_ctx: Tensor | None, lam: float = 1.0) -> Tensor:
        """Active codebook: ``[C, width]`` in static mode, ``[S, N, C, width]`` otherwise."""
        if self.mode == "static":
            return T.l2_normalize(self.embedding)
        if h_ctx is None:
            raise ValueError(f"{self.mode} codebook needs context features")
        if self.mode == "full_rank":
            return T.l2_normalize(self.generator(h_ctx))
        base = T.l2_normalize(self.embedding)
        return base + T.l2_normalize(self.adapter.delta(h_ctx)) * lam


def build_codebook(cfg: CodebookConfig, model: ModelConfig, rng: np.random.Generator) -> Codebook:
    if cfg.mode not in ("static", "full_rank", "low_rank"):
        raise ConfigError(f"unknown codebook mode {cfg.mode!r}")
    return Codebook(cfg, model, rng)


def numerical_rank(matrix: np.ndarray, rel_tol: float = 1e-8) -> int:
    s = np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int((s > rel_tol * s[0]).sum())


# -- quantization -----------------------------------------------------------

@dataclass
class QuantizationResult:
    indices: np.ndarray  # [..., T] int
    z_q: Tensor  # selected codewords, differentiable wrt the codebook
    latent: Tensor  # straight-through decoder input: value z_q, gradient to z


def nearest_codes(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codeword for every vector; ties go to the lowest index.

    ``z`` is ``[..., T, W]`` and ``codebook`` is ``[..., C, W]`` (leading dims broadcast).
    """
    diff = z[..., :, None, :] - codebook[..., None, :, :]
    return np.argmin((diff * diff).sum(axis=-1), axis=-1)


def quantize(z: Tensor, codebook: Tensor) -> QuantizationResult:
    idx = nearest_codes(z.data, codebook.data)
    z_q = T.gather_rows(codebook, idx)
    return QuantizationResult(idx, z_q, T.straight_through(z, z_q))


# -- losses -------------------------------------------------------------------

@dataclass
class LossParts:
    total: Tensor
    reconstruction: Tensor
    embedding: Tensor
    commitment: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("total", "reconstruction", "embedding", "commitment")}


def _agent_weights(mask: np.ndarray | None, shape, dtype) -> tuple[np.ndarray, float]:
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    return mask.astype(dtype), float(mask.sum())


def first_stage_loss(y, y_hat: Tensor, z: Tensor, z_q: Tensor, beta: float = 0.25, mask: np.ndarray | None = None) -> LossParts:
    """Reconstruction MSE plus embedding and (beta-weighted) commitment terms.

    Arrays are ``[..., T, ·]``; ``mask`` (shape ``[...]``) selects real agents.
    Per-agent terms are summed over time steps and averaged over agents.
    """
    y = T.as_tensor(y, dtype=y_hat.dtype)
    w, n = _agent_weights(mask, y_hat.shape[:-2], y_hat.dtype)
    steps, dims = y_hat.shape[-2:]
    sq = (y_hat - y) ** 2
    rec = (sq.sum(axis=(-2, -1)) * w).sum() * (1.0 / (n * steps * dims))
    emb_sq = (T.stop_gradient(z) - z_q) ** 2
    emb = (emb_sq.sum(axis=(-2, -1)) * w).sum() * (1.0 / n)
    com_sq = (z - T.stop_gradient(z_q)) ** 2
    com = (com_sq.sum(axis=(-2, -1)) * w).sum() * (beta / n)
    return LossParts(rec + emb + com, rec, emb, com)


# -- usage ---------------------------------------------------------------------

@dataclass
class CodebookUsage:
    counts: np.ndarray
    perplexity: float

    def write(self, path: str | Path) -> None:
        total = max(int(self.counts.sum()), 1)
        lines = ["code,count,fraction"]
        lines += [f"{c},{int(n)},{n / total:.6f}" for c, n in enumerate(self.counts)]
        lines.append(f"# perplexity={self.perplexity:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


def codebook_usage(indices, codes: int) -> CodebookUsage:
    """Histogram of code indices and its perplexity ``exp(-sum p log p)``."""
    idx = np.asarray(indices).ravel()
    counts = np.bincount(idx, minlength=codes)[:codes]
    if counts.sum() == 0:
        return CodebookUsage(counts, 0.0)
    p = counts / counts.sum()
    nz = p[p > 0]
    return CodebookUsage(counts, float(np.exp(-(nz * np.log(nz)).sum())))
