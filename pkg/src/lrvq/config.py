"""Run configuration: one JSON file with a section per subsystem.

Every section maps onto a dataclass below; unknown keys are rejected so typos
surface immediately instead of silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CODEBOOK_MODES = ("static", "full_rank", "low_rank")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_scenes: int = 16
    agents_min: int = 2
    agents_max: int = 4
    past_len: int = 8
    future_len: int = 12
    frame_interval: float = 0.4
    noise_std: float = 0.01
    # constant velocity, constant turn rate, stationary
    motion_weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    speed_range: tuple[float, float] = (0.3, 1.0)
    turn_rate_range: tuple[float, float] = (0.05, 0.2)
    spawn_radius: float = 4.0

    def validate(self):
        if self.num_scenes <= 0 or self.agents_min <= 0 or self.agents_max < self.agents_min:
            raise ConfigError("scene and agent counts must be positive with agents_min <= agents_max")
        if self.past_len <= 0 or self.future_len <= 0:
            raise ConfigError("past_len and future_len must be positive")
        if self.frame_interval <= 0:
            raise ConfigError("frame_interval must be positive")
        w = np.asarray(self.motion_weights, dtype=float)
        if w.shape != (3,) or (w < 0).any() or w.sum() <= 0:
            raise ConfigError("motion_weights must be three non-negative numbers with positive sum")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    depth: int = 2
    ff_width: int = 128
    social: bool = True
    dtype: str = "float32"

    def validate(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.depth < 1 or self.ff_width < 1:
            raise ConfigError("depth and ff_width must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")


@dataclass
class CodebookConfig:
    mode: str = "low_rank"
    codes: int = 16
    rank: int = 8
    beta: float = 0.25
    # width used for quantization; None keeps the model width (no projection)
    code_dim: int | None = None

    def validate(self, d_model: int):
        if self.mode not in CODEBOOK_MODES:
            raise ConfigError(f"unknown codebook mode {self.mode!r}; expected one of {CODEBOOK_MODES}")
        if self.codes < 2:
            raise ConfigError("codebook needs at least 2 codes")
        width = self.code_dim or d_model
        if width > d_model:
            raise ConfigError("code_dim cannot exceed d_model")
        if self.mode == "low_rank" and not 1 <= self.rank <= min(width, self.codes):
            raise ConfigError(f"rank {self.rank} must lie in [1, min(D={width}, C={self.codes})]")


@dataclass
class DiffusionConfig:
    steps: int = 100
    final_mask: float = 0.9
    final_keep: float = 1e-5
    aux_weight: float = 5e-4

    def validate(self):
        if self.steps < 1:
            raise ConfigError("diffusion needs at least one step")
        if not (0 <= self.final_mask <= 1 and 0 <= self.final_keep <= 1):
            raise ConfigError("final_mask and final_keep must lie in [0, 1]")
        if self.final_mask + self.final_keep > 1:
            raise ConfigError("final_mask + final_keep must not exceed 1")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    stage1_epochs: int = 200
    stage2_epochs: int = 200
    batch_size: int = 64
    theta_max_stage1: float = 180.0
    theta_max_stage2: float = 5.0
    checkpoint_every: int = 0
    # stage-one monitoring: measure reconstruction ADE every N steps (0 = never),
    # optionally stop below a target and/or restore the best measured weights
    eval_every: int = 0
    target_ade_rec: float | None = None
    keep_best: bool = False

    def validate(self):
        if self.eval_every < 0:
            raise ConfigError("eval_every must be non-negative")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be non-negative and batch_size positive")
        for theta in (self.theta_max_stage1, self.theta_max_stage2):
            if not 0 <= theta <= 180:
                raise ConfigError("theta_max must lie in [0, 180] degrees")


@dataclass
class EvalConfig:
    num_guesses: int = 200
    k: int = 20
    horizons: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
    mode: str = "centroid"

    def validate(self):
        if not 1 <= self.k <= self.num_guesses:
            raise ConfigError("need 1 <= k <= num_guesses")
        if self.mode not in ("centroid", "uniform"):
            raise ConfigError(f"unknown sampling mode {self.mode!r}")


@dataclass
class Config:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        self.data.validate()
        self.model.validate()
        self.codebook.validate(self.model.d_model)
        self.diffusion.validate()
        self.train.validate()
        self.eval.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "Config":
        return _build(cls, raw, "config").validate()

    def replace(self, **sections) -> "Config":
        """Copy with per-section field overrides, e.g. ``replace(codebook={"rank": 4})``."""
        raw = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                raw[key].update(value)
            else:
                raw[key] = value
        return Config.from_dict(raw)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config().validate()
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return Config.from_dict(raw)


def save_config(config: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def np_dtype(config: ModelConfig):
    return np.float32 if config.dtype == "float32" else np.float64
