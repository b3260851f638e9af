"""Single-file checkpoints: named weight arrays plus JSON metadata in one ``.npz`` archive."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .config import Config
from .model import ModelBundle, Prior, VQVAE

FORMAT_TAG = "lrvq-checkpoint/1"


class CheckpointError(ValueError):
    pass


def weights_id(state: dict[str, np.ndarray]) -> str:
    """Content hash of a state dict, independent of insertion order."""
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def _write(path: str | Path, meta: dict, state: dict[str, np.ndarray]) -> None:
    arrays = {f"param/{k}": v for k, v in state.items()}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _read(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if meta.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path}: unsupported format tag {meta.get('format')!r}")
    return meta, state


def save_stage_one(path, vqvae: VQVAE, config: Config, scale: float, lam: float) -> str:
    state = vqvae.state_dict()
    ckpt_id = weights_id(state)
    meta = {"format": FORMAT_TAG, "kind": "stage1", "id": ckpt_id, "config": config.to_dict(),
            "scale": scale, "lam": lam}
    _write(path, meta, state)
    return ckpt_id


def save_stage_two(path, prior: Prior, config: Config, stage1_id: str) -> str:
    state = prior.state_dict()
    ckpt_id = weights_id(state)
    meta = {"format": FORMAT_TAG, "kind": "stage2", "id": ckpt_id, "config": config.to_dict(),
            "stage1_id": stage1_id}
    _write(path, meta, state)
    return ckpt_id


def load_stage_one(path) -> ModelBundle:
    meta, state = _read(path)
    if meta["kind"] != "stage1":
        raise CheckpointError(f"{path}: expected a stage1 checkpoint, found {meta['kind']}")
    config = Config.from_dict(meta["config"])
    vqvae = VQVAE(config, np.random.default_rng(0))
    vqvae.load_state_dict(state)
    if weights_id(vqvae.state_dict()) != meta["id"]:
        raise CheckpointError(f"{path}: weights do not match the recorded id")
    return ModelBundle(config, vqvae, None, meta["scale"], meta["lam"], meta["id"])


def compatible(a: Config, b: Config) -> list[str]:
    """Settings that must agree between a prior and the VQ-VAE it was trained on."""
    problems = []
    pairs = [
        ("codebook.codes", a.codebook.codes, b.codebook.codes),
        ("model.d_model", a.model.d_model, b.model.d_model),
        ("data.future_len", a.data.future_len, b.data.future_len),
        ("data.past_len", a.data.past_len, b.data.past_len),
    ]
    for name, x, y in pairs:
        if x != y:
            problems.append(f"{name}: {x} != {y}")
    return problems


def load_bundle(stage1_path, stage2_path) -> ModelBundle:
    bundle = load_stage_one(stage1_path)
    meta, state = _read(stage2_path)
    if meta["kind"] != "stage2":
        raise CheckpointError(f"{stage2_path}: expected a stage2 checkpoint, found {meta['kind']}")
    if meta["stage1_id"] != bundle.stage1_id:
        raise CheckpointError(
            f"{stage2_path}: trained against stage-one checkpoint {meta['stage1_id']}, "
            f"but {stage1_path} is {bundle.stage1_id}"
        )
    config = Config.from_dict(meta["config"])
    problems = compatible(config, bundle.config)
    if problems:
        raise CheckpointError("incompatible checkpoints: " + "; ".join(problems))
    prior = Prior(config, np.random.default_rng(0))
    prior.load_state_dict(state)
    bundle.prior = prior
    # the prior's diffusion settings govern sampling
    bundle.config = bundle.config.replace(diffusion=config.diffusion.__dict__.copy())
    return bundle
