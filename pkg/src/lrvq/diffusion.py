"""Mask-and-replace discrete diffusion over code-index sequences.

Token values ``0..C-1`` are real codes and ``C`` is the absorbing mask token.
Transition matrices are row-stochastic with rows indexed by the source state,
so ``q(c_psi | c_0)`` is row ``c_0`` of ``Q_bar[psi]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import DiffusionConfig, ModelConfig, np_dtype
from .encoders import _Stack
from .tensor import Tensor

_TINY = 1e-30


def _transition(keep: float, uniform: float, mask: float, codes: int) -> np.ndarray:
    q = np.zeros((codes + 1, codes + 1))
    q[:codes, :codes] = uniform
    q[np.arange(codes), np.arange(codes)] += keep
    q[:codes, codes] = mask
    q[codes, codes] = 1.0
    return q


@dataclass
class DiffusionSchedule:
    """Per-step and cumulative transition matrices for ``steps`` diffusion steps.

    Index ``psi`` runs over ``0..steps``; entry 0 is the identity.
    """

    steps: int
    codes: int
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    gamma_bar: np.ndarray
    q_step: np.ndarray  # [steps+1, C+1, C+1]
    q_bar: np.ndarray  # [steps+1, C+1, C+1]
    posterior: np.ndarray  # [steps+1, C+1 (c_psi), C (c_0), C+1 (c_psi-1)]

    @property
    def mask_token(self) -> int:
        return self.codes


def build_schedule(steps: int, codes: int, cfg: DiffusionConfig | None = None) -> DiffusionSchedule:
    """Linear cumulative ramps: keep mass 1 -> ``final_keep``, mask mass 0 -> ``final_mask``.

    The rest of the cumulative mass is spread uniformly over the real codes.
    """
    cfg = cfg or DiffusionConfig(steps=steps)
    if steps < 1:
        raise ValueError("diffusion needs at least one step")
    frac = np.arange(steps + 1) / steps
    alpha_bar = 1.0 + (cfg.final_keep - 1.0) * frac
    gamma_bar = cfg.final_mask * frac
    beta_bar = (1.0 - alpha_bar - gamma_bar) / codes

    alpha = np.ones(steps + 1)
    gamma = np.zeros(steps + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha[1:] = np.where(alpha_bar[:-1] > 0, alpha_bar[1:] / alpha_bar[:-1], 0.0)
        gamma[1:] = np.where(gamma_bar[:-1] < 1, 1.0 - (1.0 - gamma_bar[1:]) / (1.0 - gamma_bar[:-1]), 1.0)
    beta = (1.0 - alpha - gamma) / codes
    beta[0] = 0.0

    tol = 1e-12
    for name, arr in (("alpha", alpha), ("beta", beta), ("gamma", gamma), ("beta_bar", beta_bar)):
        if (arr < -tol).any() or (arr > 1 + tol).any():
            raise ValueError(f"schedule probability {name} leaves [0, 1]")
    alpha, beta, gamma = np.clip(alpha, 0, 1), np.clip(beta, 0, 1), np.clip(gamma, 0, 1)
    beta_bar = np.clip(beta_bar, 0, 1)

    q_step = np.stack([_transition(alpha[i], beta[i], gamma[i], codes) for i in range(steps + 1)])
    q_step[0] = np.eye(codes + 1)
    q_bar = np.stack([_transition(alpha_bar[i], beta_bar[i], gamma_bar[i], codes) for i in range(steps + 1)])
    q_bar[0] = np.eye(codes + 1)
    posterior = _posterior_tables(q_step, q_bar, codes)
    return DiffusionSchedule(steps, codes, alpha, beta, gamma, alpha_bar, beta_bar, gamma_bar, q_step, q_bar, posterior)


def _posterior_tables(q_step: np.ndarray, q_bar: np.ndarray, codes: int) -> np.ndarray:
    """``q(c_{psi-1} | c_psi, c_0)`` for every step, current token and clean token.

    Combinations where ``c_0`` cannot reach ``c_psi`` get an all-zero row.
    """
    steps = q_step.shape[0] - 1
    out = np.zeros((steps + 1, codes + 1, codes, codes + 1))
    for psi in range(1, steps + 1):
        # joint[c0, prev, cur] = q_bar[psi-1][c0, prev] * q_step[psi][prev, cur]
        joint = q_bar[psi - 1][:codes, :, None] * q_step[psi][None, :, :]
        norm = joint.sum(axis=1)  # [c0, cur] == q_bar[psi][c0, cur]
        with np.errstate(divide="ignore", invalid="ignore"):
            post = np.where(norm[:, None, :] > 0, joint / norm[:, None, :], 0.0)
        out[psi] = post.transpose(2, 0, 1)
    return out


def _check_step(schedule: DiffusionSchedule, psi) -> np.ndarray:
    psi = np.asarray(psi)
    if (psi < 1).any() or (psi > schedule.steps).any():
        raise ValueError(f"diffusion step must lie in [1, {schedule.steps}]")
    return psi


def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of ``probs[..., K]``, all rows at once."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    return np.minimum((cdf <= u).sum(axis=-1), probs.shape[-1] - 1)


def forward_noise(c0: np.ndarray, psi, schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Sample ``c_psi ~ q(c_psi | c_0)`` independently per slot.

    ``psi`` is a scalar or an integer array broadcastable against ``c0``.
    """
    c0 = np.asarray(c0)
    if (c0 < 0).any() or (c0 >= schedule.codes).any():
        raise ValueError("clean tokens must be real codes (no mask)")
    psi = _check_step(schedule, psi)
    probs = schedule.q_bar[np.broadcast_to(psi, c0.shape), c0]
    return _sample_categorical(probs, rng)


def posterior_weights(schedule: DiffusionSchedule, c_psi: np.ndarray, psi) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot posterior tables ``[..., C, C+1]`` and the mask of clean tokens consistent with ``c_psi``."""
    psi = np.broadcast_to(_check_step(schedule, psi), c_psi.shape)
    tables = schedule.posterior[psi, c_psi]
    return tables, tables.sum(axis=-1) > 0


def denoise_posterior(c_psi: np.ndarray, p0, psi, schedule: DiffusionSchedule) -> Tensor:
    """``p(c_{psi-1} | c_psi) = sum_c0 q(c_{psi-1} | c_psi, c0) p0(c0)``.

    ``p0`` is ``[..., T, C]`` (a Tensor to keep gradients); the result is
    ``[..., T, C+1]``. Clean tokens that cannot produce ``c_psi`` are dropped
    and the remaining weights renormalized.
    """
    p0 = T.as_tensor(p0)
    c_psi = np.asarray(c_psi)
    tables, valid = posterior_weights(schedule, c_psi, psi)
    w = p0 * valid.astype(p0.dtype)
    mixed = T.matmul(w.reshape(*w.shape[:-1], 1, w.shape[-1]), Tensor(tables.astype(p0.dtype)))
    mixed = mixed.reshape(*w.shape[:-1], tables.shape[-1])
    return mixed / w.sum(axis=-1, keepdims=True)


def categorical_kl(q: np.ndarray, p: Tensor) -> Tensor:
    """``sum q log(q/p)`` over the last axis; ``q`` is a constant distribution."""
    q = np.asarray(q, dtype=p.dtype)
    log_q = np.where(q > 0, np.log(np.where(q > 0, q, 1.0)), 0.0)
    return T.as_tensor((q * log_q).sum(axis=-1)) - (T.log(p + _TINY) * q).sum(axis=-1)


# -- denoiser ------------------------------------------------------------------

class Denoiser(nn.Module):
    """Predicts clean-token logits for every slot of every agent.

    Inputs are the noisy tokens of all agents in a scene (neighbours enter
    through social attention), the diffusion step, and frozen ``h_ctx``.
    """

    def __init__(self, cfg: ModelConfig, codes: int, steps: int, future_len: int, rng: np.random.Generator):
        dt = np_dtype(cfg)
        D = cfg.d_model
        self.codes = codes
        self.token_embedding = nn.uniform_init(rng, (codes + 1, D), D, dt)
        self.step_embedding = nn.uniform_init(rng, (steps + 1, D), D, dt)
        self.pos = nn.uniform_init(rng, (future_len, D), D, dt)
        self.blocks = _Stack(cfg, rng, cross=True)
        self.norm = nn.LayerNorm(D, dt)
        self.head = nn.Linear(D, codes, rng, dt)

    def __call__(self, tokens: np.ndarray, psi: np.ndarray, h_ctx: Tensor, mask: np.ndarray) -> Tensor:
        S, N, L = tokens.shape
        D = self.pos.shape[-1]
        psi = np.broadcast_to(np.asarray(psi).reshape(-1), (S,))
        x = T.gather_rows(self.token_embedding, tokens)
        step = T.gather_rows(self.step_embedding, psi[:, None]).reshape(S, 1, 1, D)
        x = x + step + self.pos
        return self.head(self.norm(self.blocks(x, mask, h_ctx)))


# -- training objective ------------------------------------------------------------

@dataclass
class PriorLoss:
    total: Tensor
    correct: int
    slots: int

    @property
    def accuracy(self) -> float:
        return self.correct / max(self.slots, 1)


def prior_terms(
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    c0: np.ndarray,
    c_psi: np.ndarray,
    psi: np.ndarray,
    h_ctx: Tensor,
    mask: np.ndarray,
    aux_weight: float,
) -> PriorLoss:
    """Loss for given noisy tokens: NLL of ``c0`` at step 1, else posterior KL plus ``aux_weight`` x clean-token NLL.

    ``psi`` holds one step per scene. Per-slot terms are summed over the
    sequence and averaged over real agents.
    """
    S, N, L = c0.shape
    psi = np.asarray(psi).reshape(S)
    logits = denoiser(c_psi, psi, h_ctx, mask)
    log_p0 = T.log_softmax(logits, axis=-1)
    p0 = T.exp(log_p0)
    p_prev = denoise_posterior(c_psi, p0, psi[:, None, None], schedule)

    dt = logits.dtype
    onehot0 = (c0[..., None] == np.arange(schedule.codes)).astype(dt)
    onehot0_ext = (c0[..., None] == np.arange(schedule.codes + 1)).astype(dt)
    first = (psi == 1)[:, None, None]

    nll_prev = -(T.log(p_prev + _TINY) * onehot0_ext).sum(axis=-1)
    q_true = schedule.posterior[np.broadcast_to(psi[:, None, None], c0.shape), c_psi, c0]
    kl = categorical_kl(q_true, p_prev)
    aux = -(log_p0 * onehot0).sum(axis=-1)
    per_slot = nll_prev * first.astype(dt) + (kl + aux * aux_weight) * (~first).astype(dt)

    w = mask.astype(dt)
    n = max(float(mask.sum()), 1.0)
    total = (per_slot.sum(axis=-1) * w).sum() * (1.0 / n)

    pred = logits.data.argmax(axis=-1)
    hits = (pred == c0) & mask[..., None]
    return PriorLoss(total, int(hits.sum()), int(mask.sum()) * L)


def prior_loss(
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    c0: np.ndarray,
    h_ctx: Tensor,
    mask: np.ndarray,
    rng: np.random.Generator,
    aux_weight: float = 5e-4,
) -> PriorLoss:
    """Draw one step per scene uniformly from ``1..steps``, corrupt ``c0`` and score the denoiser."""
    S = c0.shape[0]
    psi = rng.integers(1, schedule.steps + 1, size=S)
    c_psi = forward_noise(c0, psi[:, None, None], schedule, rng)
    return prior_terms(denoiser, schedule, c0, c_psi, psi, h_ctx, mask, aux_weight)


def sample_tokens(
    denoiser: Denoiser,
    schedule: DiffusionSchedule,
    h_ctx: Tensor,
    mask: np.ndarray,
    future_len: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Ancestral sampling from all-mask down to step 0, all agents of a scene in lockstep.

    Every slot's distribution is computed before any slot is drawn.
    """
    S, N = mask.shape
    tokens = np.full((S, N, future_len), schedule.mask_token, dtype=np.int64)
    with T.no_grad():
        for psi in range(schedule.steps, 0, -1):
            logits = denoiser(tokens, np.full(S, psi), h_ctx, mask)
            p0 = T.softmax(logits, axis=-1)
            probs = denoise_posterior(tokens, p0, psi, schedule).data
            tokens = _sample_categorical(probs, rng)
    if (tokens[mask] == schedule.mask_token).any():
        raise RuntimeError("mask token survived to step 0")
    return tokens
