"""The two trainable halves of the forecaster: the VQ-VAE and the diffusion prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import Config, np_dtype
from .diffusion import Denoiser, DiffusionSchedule, build_schedule, sample_tokens
from .encoders import ContextEncoder, Decoder, FutureEncoder
from .tensor import Tensor
from .vq import Codebook, LossParts, QuantizationResult, first_stage_loss, quantize


@dataclass
class StageOneOutput:
    h_ctx: Tensor
    z: Tensor
    codebook: Tensor
    quant: QuantizationResult
    y_hat: Tensor  # absolute (normalized) future positions
    loss: LossParts


class VQVAE(nn.Module):
    """Context encoder, future encoder, codebook and decoder.

    Futures are modelled as offsets from each agent's last observed position;
    ``y_hat`` is returned in the same frame as the inputs.
    """

    def __init__(self, config: Config, rng: np.random.Generator):
        m, d = config.model, config.data
        width = config.codebook.code_dim or m.d_model
        self.beta = config.codebook.beta
        self.dtype = np_dtype(m)
        self.context_encoder = ContextEncoder(m, d.past_len, rng)
        self.future_encoder = FutureEncoder(m, d.future_len, width, rng)
        self.codebook = Codebook(config.codebook, m, rng)
        self.decoder = Decoder(m, d.future_len, width, rng)

    def _arr(self, x) -> np.ndarray:
        return np.asarray(x, dtype=self.dtype)

    def context(self, past, mask) -> Tensor:
        return self.context_encoder(self._arr(past), mask)

    def __call__(self, past, future, mask, lam: float = 1.0) -> StageOneOutput:
        past, future = self._arr(past), self._arr(future)
        last = past[:, :, -1:, :]
        h_ctx = self.context(past, mask)
        z = self.future_encoder(future - last, h_ctx, mask)
        e_c = self.codebook(h_ctx, lam)
        quant = quantize(z, e_c)
        y_hat = self.decoder(quant.latent, mask) + last
        loss = first_stage_loss(future, y_hat, z, quant.z_q, self.beta, mask)
        return StageOneOutput(h_ctx, z, e_c, quant, y_hat, loss)

    def encode_tokens(self, past, future, mask, lam: float = 1.0) -> np.ndarray:
        with T.no_grad():
            return self(past, future, mask, lam).quant.indices

    def decode_tokens(self, tokens: np.ndarray, past, mask, lam: float = 1.0, h_ctx: Tensor | None = None) -> np.ndarray:
        """Map code indices ``[S, N, T]`` to absolute future positions ``[S, N, T, 2]``."""
        past = self._arr(past)
        with T.no_grad():
            if h_ctx is None:
                h_ctx = self.context(past, mask)
            e_c = self.codebook(h_ctx, lam)
            z_q = T.gather_rows(e_c, tokens)
            return self.decoder(z_q, mask).data + past[:, :, -1:, :]


class Prior(nn.Module):
    def __init__(self, config: Config, rng: np.random.Generator):
        self.denoiser = Denoiser(config.model, config.codebook.codes, config.diffusion.steps, config.data.future_len, rng)
        self._schedule: tuple | None = None

    def schedule(self, config: Config) -> DiffusionSchedule:
        key = (config.diffusion.steps, config.codebook.codes, config.diffusion.final_mask, config.diffusion.final_keep)
        if self._schedule is None or self._schedule[0] != key:
            self._schedule = (key, build_schedule(config.diffusion.steps, config.codebook.codes, config.diffusion))
        return self._schedule[1]


@dataclass
class ModelBundle:
    """A trained stage-one model with its matching prior, plus what inference needs to know."""

    config: Config
    vqvae: VQVAE
    prior: Prior | None
    scale: float
    lam: float
    stage1_id: str = ""

    def sample(self, past: np.ndarray, mask: np.ndarray, rng: np.random.Generator, h_ctx: Tensor | None = None) -> np.ndarray:
        """One joint token draw per scene followed by decoding, in normalized coordinates."""
        if self.prior is None:
            raise ValueError("bundle has no trained prior")
        with T.no_grad():
            if h_ctx is None:
                h_ctx = self.vqvae.context(past, mask)
            sched = self.prior.schedule(self.config)
            tokens = sample_tokens(self.prior.denoiser, sched, h_ctx, mask, self.config.data.future_len, rng)
            return self.vqvae.decode_tokens(tokens, past, mask, self.lam, h_ctx)
