"""Two-stage optimization: the VQ-VAE first, then the diffusion prior on its frozen codes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import compatible, save_stage_one, save_stage_two, weights_id
from .config import Config, np_dtype
from .data import Scene, SceneBatch, dataset_scale, normalize, rotate_batch
from .diffusion import prior_loss
from .model import ModelBundle, Prior, VQVAE
from .optim import AdamW, cosine_ramp
from .sampler import evaluate_dataset
from .vq import codebook_usage

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def normalized_batches(scenes: list[Scene], scale: float, dtype) -> SceneBatch:
    return SceneBatch.from_scenes([normalize(s, scale)[0] for s in scenes], dtype)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _subset(batch: SceneBatch, idx: np.ndarray) -> SceneBatch:
    # trim agent padding down to what this subset needs
    n = int(batch.mask[idx].sum(axis=1).max())
    return SceneBatch(batch.past[idx, :n], batch.future[idx, :n], batch.mask[idx, :n], [batch.scene_ids[i] for i in idx])


def write_curve(rows: list[dict], path: str | Path) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def epoch_means(history: list[dict]) -> list[dict]:
    """Collapse per-step rows into one row per epoch (means of every numeric column)."""
    rows: dict[int, list[dict]] = {}
    for rec in history:
        rows.setdefault(rec["epoch"], []).append(rec)
    out = []
    for epoch, recs in rows.items():
        row = {"epoch": epoch, "steps": len(recs)}
        for key in recs[0]:
            if key not in ("epoch", "step"):
                vals = [r[key] for r in recs if not math.isnan(r[key])]
                row[key] = float(np.mean(vals)) if vals else math.nan
        out.append(row)
    return out


# -- stage one ----------------------------------------------------------------

def reconstruction_ade(vqvae: VQVAE, batch: SceneBatch, lam: float) -> float:
    """Mean over agents of the average displacement between a future and its reconstruction."""
    with T.no_grad():
        out = vqvae(batch.past, batch.future, batch.mask, lam)
    err = np.linalg.norm(out.y_hat.data.astype(np.float64) - batch.future, axis=-1).mean(axis=-1)
    return float(err[batch.mask].mean())


@dataclass
class StageOneResult:
    vqvae: VQVAE
    config: Config
    scale: float
    lam: float
    history: list[dict] = field(default_factory=list)
    ade_rec: float = float("nan")
    checkpoint_id: str = ""
    steps: int = 0

    def bundle(self) -> ModelBundle:
        return ModelBundle(self.config, self.vqvae, None, self.scale, self.lam, self.checkpoint_id)


def train_stage_one(
    scenes: list[Scene],
    config: Config,
    rng: np.random.Generator,
    out_dir: str | Path | None = None,
) -> StageOneResult:
    """Minimize reconstruction + embedding + commitment loss over ``stage1_epochs`` epochs.

    Every ``train.eval_every`` steps (0 disables) the reconstruction ADE over
    the whole set is measured. Training stops at the first measurement below
    ``train.target_ade_rec`` when one is set, and with ``train.keep_best`` the
    weights of the best measurement are restored at the end.
    """
    config.validate()
    tc = config.train
    eval_every, target_ade_rec, keep_best = tc.eval_every, tc.target_ade_rec, tc.keep_best
    init_rng, data_rng = rng.spawn(2)
    vqvae = VQVAE(config, init_rng)
    dtype = np_dtype(config.model)
    scale = dataset_scale(scenes)
    full = normalized_batches(scenes, scale, dtype)
    per_epoch = math.ceil(len(scenes) / tc.batch_size)
    total = tc.stage1_epochs * per_epoch
    opt = AdamW(vqvae.parameters(), tc.lr, (tc.beta1, tc.beta2), weight_decay=tc.weight_decay, grad_clip=tc.grad_clip)
    out_dir = Path(out_dir) if out_dir else None
    history: list[dict] = []
    lam = cosine_ramp(0, total - 1)
    step = 0
    best = (math.inf, None, lam)
    stop = False
    for epoch in range(tc.stage1_epochs):
        for idx in _batches(len(scenes), tc.batch_size, data_rng):
            batch = rotate_batch(_subset(full, idx), tc.theta_max_stage1, data_rng)
            lam = cosine_ramp(step, total - 1)
            try:
                out = vqvae(batch.past, batch.future, batch.mask, lam)
                opt.zero_grad()
                T.backward(out.loss.total)
                gnorm = opt.step()
            except FloatingPointError as exc:
                raise TrainingError(f"stage one, step {step}: {exc}") from exc
            rec = out.loss.values()
            rec.update(step=step, epoch=epoch, lam=lam, grad_norm=gnorm, ade_rec=math.nan,
                       perplexity=codebook_usage(out.quant.indices[batch.mask], config.codebook.codes).perplexity)
            history.append(rec)
            step += 1
            if eval_every and step % eval_every == 0:
                ade = reconstruction_ade(vqvae, full, lam)
                rec["ade_rec"] = ade
                log.info("stage1 step %d loss %.4f ade_rec %.4f", step, rec["total"], ade)
                if keep_best and ade < best[0]:
                    best = (ade, vqvae.state_dict(), lam)
                if target_ade_rec is not None and ade < target_ade_rec:
                    stop = True
                    break
        if out_dir and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            save_stage_one(out_dir / f"stage1_epoch{epoch + 1}.npz", vqvae, config, scale, lam)
        if stop:
            break
    ade = reconstruction_ade(vqvae, full, lam)
    if best[1] is not None and best[0] < ade:
        vqvae.load_state_dict(best[1])
        ade, lam = best[0], best[2]
    result = StageOneResult(vqvae, config, scale, lam, history, ade, weights_id(vqvae.state_dict()), step)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_id = save_stage_one(out_dir / "stage1.npz", vqvae, config, scale, lam)
        write_curve(history, out_dir / "stage1_steps.csv")
        write_curve(epoch_means(history), out_dir / "stage1_curve.csv")
    return result


# -- stage two ----------------------------------------------------------------

@dataclass
class StageTwoResult:
    prior: Prior
    config: Config
    history: list[dict] = field(default_factory=list)
    accuracy: float = float("nan")
    checkpoint_id: str = ""


def token_accuracy(bundle: ModelBundle, prior: Prior, scenes: list[Scene], rng: np.random.Generator,
                   repeats: int = 4, tokens: np.ndarray | None = None) -> float:
    """Fraction of real slots where the denoiser's most likely clean token is the true one.

    Each repeat draws a fresh diffusion step per scene. ``tokens`` overrides
    the encoder's tokens (used to measure chance level on uniform codes).
    """
    cfg = bundle.config
    batch = normalized_batches(scenes, bundle.scale, bundle.vqvae.dtype)
    sched = prior.schedule(cfg)
    with T.no_grad():
        h_ctx = bundle.vqvae.context(batch.past, batch.mask)
        c0 = tokens if tokens is not None else bundle.vqvae.encode_tokens(batch.past, batch.future, batch.mask, bundle.lam)
        hits = slots = 0
        for _ in range(repeats):
            res = prior_loss(prior.denoiser, sched, c0, h_ctx, batch.mask, rng, cfg.diffusion.aux_weight)
            hits += res.correct
            slots += res.slots
    return hits / slots


def train_stage_two(
    scenes: list[Scene],
    stage_one: ModelBundle,
    config: Config,
    rng: np.random.Generator,
    out_dir: str | Path | None = None,
) -> StageTwoResult:
    """Fit the diffusion prior to the frozen VQ-VAE's codes."""
    config.validate()
    problems = compatible(config, stage_one.config)
    if problems:
        raise TrainingError("stage-one checkpoint is incompatible: " + "; ".join(problems))
    tc = config.train
    init_rng, data_rng, eval_rng = rng.spawn(3)
    prior = Prior(config, init_rng)
    sched = prior.schedule(config)
    vqvae = stage_one.vqvae
    frozen_id = weights_id(vqvae.state_dict())
    full = normalized_batches(scenes, stage_one.scale, vqvae.dtype)
    opt = AdamW(prior.parameters(), tc.lr, (tc.beta1, tc.beta2), weight_decay=tc.weight_decay, grad_clip=tc.grad_clip)
    history: list[dict] = []
    step = 0
    for epoch in range(tc.stage2_epochs):
        for idx in _batches(len(scenes), tc.batch_size, data_rng):
            batch = rotate_batch(_subset(full, idx), tc.theta_max_stage2, data_rng)
            with T.no_grad():
                enc = vqvae(batch.past, batch.future, batch.mask, stage_one.lam)
            try:
                res = prior_loss(prior.denoiser, sched, enc.quant.indices, T.stop_gradient(enc.h_ctx), batch.mask,
                                 data_rng, config.diffusion.aux_weight)
                opt.zero_grad()
                T.backward(res.total)
                gnorm = opt.step()
            except FloatingPointError as exc:
                raise TrainingError(f"stage two, step {step}: {exc}") from exc
            history.append({"step": step, "epoch": epoch, "loss": float(res.total.data),
                            "accuracy": res.accuracy, "grad_norm": gnorm})
            step += 1
    if weights_id(vqvae.state_dict()) != frozen_id:
        raise TrainingError("stage-one weights changed during stage two")
    acc = token_accuracy(stage_one, prior, scenes, eval_rng) if scenes else float("nan")
    result = StageTwoResult(prior, config, history, acc)
    result.checkpoint_id = weights_id(prior.state_dict())
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_id = save_stage_two(out_dir / "stage2.npz", prior, config, stage_one.stage1_id)
        write_curve(history, out_dir / "stage2_steps.csv")
        write_curve(epoch_means(history), out_dir / "stage2_curve.csv")
    return result


# -- ablation -------------------------------------------------------------------

ABLATION_COLUMNS = ("mode", "rank", "ADE_rec", "Acc", "ADE_20", "FDE_20")


def run_ablation(
    scenes: list[Scene],
    config: Config,
    modes=("static", "full_rank", "low_rank"),
    ranks=(4, 16),
    eval_scenes: list[Scene] | None = None,
    stage_one_cache: dict | None = None,
) -> list[dict]:
    """Train and evaluate every (mode, rank) cell with the same seed.

    Static and full-rank codebooks ignore the rank, so those cells are
    trained once and the row is repeated for each rank. ``stage_one_cache``
    maps :func:`cell_key` to finished stage-one results; it is consulted
    before training and filled afterwards.
    """
    eval_scenes = scenes if eval_scenes is None else eval_scenes
    cache = {} if stage_one_cache is None else stage_one_cache
    cells: dict[tuple, dict] = {}
    rows = []
    for mode in modes:
        for rank in ranks:
            cell = config.replace(codebook={"mode": mode, "rank": rank})
            key = cell_key(cell)
            if key not in cells:
                rng = np.random.default_rng(cell.seed)
                s1_rng, s2_rng, ev_rng = rng.spawn(3)
                if key not in cache:
                    cache[key] = train_stage_one(scenes, cell, s1_rng)
                cells[key] = _finish_cell(scenes, eval_scenes, cell, cache[key], s2_rng, ev_rng)
            rows.append({"mode": mode, "rank": rank, **cells[key]})
            log.info("ablation %s r=%d: %s", mode, rank, rows[-1])
    return rows


def cell_key(config: Config) -> tuple:
    cb = config.codebook
    return (cb.mode, cb.rank if cb.mode == "low_rank" else None)


def _finish_cell(scenes, eval_scenes, config: Config, s1: StageOneResult, s2_rng, ev_rng) -> dict:
    bundle = s1.bundle()
    s2 = train_stage_two(scenes, bundle, config, s2_rng)
    bundle.prior = s2.prior
    ev = evaluate_dataset(eval_scenes, bundle, config.eval, ev_rng)
    full = eval_scenes[0].future_len * eval_scenes[0].frame_interval
    tag = f"{full:g}s"
    return {
        "ADE_rec": s1.ade_rec,
        "Acc": s2.accuracy,
        "ADE_20": ev.aggregate[f"ADE_centroid@{tag}"],
        "FDE_20": ev.aggregate[f"FDE_centroid@{tag}"],
    }


def write_ablation(rows: list[dict], path: str | Path) -> None:
    write_curve(rows, path)
