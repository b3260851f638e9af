"""Scenes of agent trajectories: file I/O, normalization, augmentation and a synthetic generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig

FORMAT_TAG = "lrvq-scenes/1"


class SceneFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AgentTrack:
    agent_id: str
    past: np.ndarray
    future: np.ndarray

    def __post_init__(self):
        past = np.asarray(self.past, dtype=np.float64)
        future = np.asarray(self.future, dtype=np.float64)
        if past.ndim != 2 or past.shape[1] != 2 or future.ndim != 2 or future.shape[1] != 2:
            raise ValueError(f"agent {self.agent_id}: past and future must be (steps, 2) arrays")
        if not (np.isfinite(past).all() and np.isfinite(future).all()):
            raise ValueError(f"agent {self.agent_id}: non-finite coordinates")
        object.__setattr__(self, "past", past)
        object.__setattr__(self, "future", future)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    agents: tuple[AgentTrack, ...]
    frame_interval: float = 0.4

    def __post_init__(self):
        agents = tuple(self.agents)
        if not agents:
            raise ValueError(f"scene {self.scene_id}: needs at least one agent")
        tp, t = agents[0].past.shape[0], agents[0].future.shape[0]
        for a in agents:
            if a.past.shape[0] != tp or a.future.shape[0] != t:
                raise ValueError(
                    f"scene {self.scene_id}: agent {a.agent_id} has lengths "
                    f"({a.past.shape[0]}, {a.future.shape[0]}), expected ({tp}, {t})"
                )
        object.__setattr__(self, "agents", agents)

    @property
    def past_len(self) -> int:
        return self.agents[0].past.shape[0]

    @property
    def future_len(self) -> int:
        return self.agents[0].future.shape[0]

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    def past(self) -> np.ndarray:
        return np.stack([a.past for a in self.agents])

    def future(self) -> np.ndarray:
        return np.stack([a.future for a in self.agents])

    def with_coordinates(self, past: np.ndarray, future: np.ndarray) -> "Scene":
        agents = tuple(AgentTrack(a.agent_id, p, f) for a, p, f in zip(self.agents, past, future))
        return Scene(self.scene_id, agents, self.frame_interval)


@dataclass(frozen=True)
class NormalizationState:
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.offset) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale + self.offset


# -- file format -------------------------------------------------------------

def save_scenes(scenes: list[Scene], path: str | Path) -> None:
    """Write scenes as one header line followed by comma-separated point records."""
    if scenes:
        tp, t, dt = scenes[0].past_len, scenes[0].future_len, scenes[0].frame_interval
    else:
        tp, t, dt = 0, 0, 0.0
    with open(path, "w", newline="") as fh:
        fh.write(f"# {FORMAT_TAG} past_len={tp} future_len={t} frame_interval={dt!r}\n")
        writer = csv.writer(fh)
        for scene in scenes:
            for agent in scene.agents:
                for role, pts in (("past", agent.past), ("future", agent.future)):
                    for step, (x, y) in enumerate(pts):
                        writer.writerow([scene.scene_id, agent.agent_id, role, step, repr(float(x)), repr(float(y))])


def _parse_header(line: str) -> tuple[int, int, float]:
    parts = line.lstrip("#").split()
    if not parts or parts[0] != FORMAT_TAG:
        raise SceneFormatError(f"line 1: expected header starting with '# {FORMAT_TAG}'")
    fields = {}
    for item in parts[1:]:
        key, _, value = item.partition("=")
        fields[key] = value
    try:
        return int(fields["past_len"]), int(fields["future_len"]), float(fields["frame_interval"])
    except (KeyError, ValueError):
        raise SceneFormatError("line 1: header must declare past_len, future_len and frame_interval") from None


def load_scenes(path: str | Path) -> list[Scene]:
    """Read and validate a scene file written by :func:`save_scenes`."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not any(line.strip() for line in lines):
        return []
    tp, t, dt = _parse_header(lines[0])
    # scene_id -> agent_id -> role -> {step: (x, y)}
    records: dict[str, dict[str, dict[str, dict[int, tuple[float, float]]]]] = {}
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 6:
            raise SceneFormatError(f"line {lineno}: expected 6 fields, got {len(row)}")
        scene_id, agent_id, role, step, x, y = row
        if role not in ("past", "future"):
            raise SceneFormatError(f"line {lineno}: role must be 'past' or 'future', got {role!r}")
        try:
            step_i, xf, yf = int(step), float(x), float(y)
        except ValueError:
            raise SceneFormatError(f"line {lineno}: malformed step or coordinate") from None
        if not (math.isfinite(xf) and math.isfinite(yf)):
            raise SceneFormatError(f"line {lineno}: non-finite coordinate")
        steps = records.setdefault(scene_id, {}).setdefault(agent_id, {"past": {}, "future": {}})[role]
        if step_i in steps:
            raise SceneFormatError(f"line {lineno}: duplicate {role} step {step_i} for agent {agent_id}")
        steps[step_i] = (xf, yf)

    scenes = []
    for scene_id, agents in records.items():
        tracks = []
        for agent_id, roles in agents.items():
            arrays = {}
            for role, expected in (("past", tp), ("future", t)):
                steps = roles[role]
                if sorted(steps) != list(range(expected)):
                    raise SceneFormatError(
                        f"scene {scene_id}, agent {agent_id}: {len(steps)} {role} points, header declares {expected}"
                    )
                arrays[role] = np.array([steps[i] for i in range(expected)], dtype=np.float64)
            tracks.append(AgentTrack(agent_id, arrays["past"], arrays["future"]))
        scenes.append(Scene(scene_id, tuple(tracks), dt))
    return scenes


# -- geometry ----------------------------------------------------------------

def past_centroid(scene: Scene) -> np.ndarray:
    return scene.past().reshape(-1, 2).mean(axis=0)


def rotate_scene(scene: Scene, angle_deg: float, center: np.ndarray | None = None) -> Scene:
    c = past_centroid(scene) if center is None else np.asarray(center, dtype=np.float64)
    th = math.radians(angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    past = (scene.past() - c) @ rot.T + c
    future = (scene.future() - c) @ rot.T + c
    return scene.with_coordinates(past, future)


def rotate_augment(scene: Scene, theta_max: float, rng: np.random.Generator) -> Scene:
    """Rotate the whole scene about its past centroid by one angle drawn from U(0, theta_max) degrees."""
    if not 0 <= theta_max <= 180:
        raise ValueError(f"theta_max must lie in [0, 180] degrees, got {theta_max}")
    if theta_max == 0:
        return scene
    return rotate_scene(scene, rng.uniform(0.0, theta_max))


def dataset_scale(scenes: list[Scene]) -> float:
    """RMS distance of past points from their scene's past centroid, pooled over the dataset."""
    sq = [((s.past() - past_centroid(s)) ** 2).sum(axis=-1).ravel() for s in scenes]
    if not sq:
        return 1.0
    rms = math.sqrt(float(np.concatenate(sq).mean()))
    return rms if rms > 0 else 1.0


def normalize(scene: Scene, scale: float | None = None) -> tuple[Scene, NormalizationState]:
    """Center on the past centroid and divide by ``scale`` (the scene's own RMS when omitted)."""
    state = NormalizationState(past_centroid(scene), dataset_scale([scene]) if scale is None else float(scale))
    return scene.with_coordinates(state.apply(scene.past()), state.apply(scene.future())), state


def denormalize(scene: Scene, state: NormalizationState) -> Scene:
    return scene.with_coordinates(state.invert(scene.past()), state.invert(scene.future()))


# -- synthetic generator -----------------------------------------------------

def constant_velocity(start, velocity, steps: int) -> np.ndarray:
    t = np.arange(steps, dtype=np.float64)[:, None]
    return np.asarray(start, dtype=np.float64) + t * np.asarray(velocity, dtype=np.float64)


def constant_turn(start, heading: float, speed: float, turn_rate: float, steps: int) -> np.ndarray:
    headings = heading + turn_rate * np.arange(steps - 1)
    moves = speed * np.stack([np.cos(headings), np.sin(headings)], axis=-1)
    return np.asarray(start, dtype=np.float64) + np.vstack([np.zeros((1, 2)), np.cumsum(moves, axis=0)])


def stationary(start, steps: int) -> np.ndarray:
    return np.repeat(np.asarray(start, dtype=np.float64)[None], steps, axis=0)


MOTIONS = ("constant_velocity", "constant_turn", "stationary")


def synthesize_agent(motion: str, cfg: DataConfig, rng: np.random.Generator) -> np.ndarray:
    steps = cfg.past_len + cfg.future_len
    r = cfg.spawn_radius * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    start = np.array([r * math.cos(phi), r * math.sin(phi)])
    heading = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(*cfg.speed_range)
    if motion == "constant_velocity":
        pts = constant_velocity(start, speed * np.array([math.cos(heading), math.sin(heading)]), steps)
    elif motion == "constant_turn":
        rate = rng.uniform(*cfg.turn_rate_range) * rng.choice([-1.0, 1.0])
        pts = constant_turn(start, heading, speed, rate, steps)
    elif motion == "stationary":
        pts = stationary(start, steps)
    else:
        raise ValueError(f"unknown motion primitive {motion!r}")
    if cfg.noise_std > 0:
        pts = pts + rng.normal(0.0, cfg.noise_std, size=pts.shape)
    return pts


def synthesize_dataset(cfg: DataConfig, rng: np.random.Generator) -> list[Scene]:
    """Draw scenes whose agents follow a mix of simple motion primitives plus Gaussian noise."""
    cfg.validate()
    weights = np.asarray(cfg.motion_weights, dtype=np.float64)
    weights = weights / weights.sum()
    scenes = []
    for s in range(cfg.num_scenes):
        n = int(rng.integers(cfg.agents_min, cfg.agents_max + 1))
        agents = []
        for a in range(n):
            motion = MOTIONS[int(rng.choice(3, p=weights))]
            pts = synthesize_agent(motion, cfg, rng)
            agents.append(AgentTrack(f"a{a}", pts[: cfg.past_len], pts[cfg.past_len :]))
        scenes.append(Scene(f"s{s}", tuple(agents), cfg.frame_interval))
    return scenes


# -- batching ----------------------------------------------------------------

@dataclass
class SceneBatch:
    """Scenes padded to a common agent count.

    ``past`` is ``[S, N, Tp, 2]``, ``future`` is ``[S, N, T, 2]`` and ``mask``
    marks real agents with True.
    """

    past: np.ndarray
    future: np.ndarray
    mask: np.ndarray
    scene_ids: list[str]

    @classmethod
    def from_scenes(cls, scenes: list[Scene], dtype=np.float64) -> "SceneBatch":
        if not scenes:
            raise ValueError("cannot batch an empty scene list")
        tp, t = scenes[0].past_len, scenes[0].future_len
        n = max(s.num_agents for s in scenes)
        past = np.zeros((len(scenes), n, tp, 2), dtype=dtype)
        future = np.zeros((len(scenes), n, t, 2), dtype=dtype)
        mask = np.zeros((len(scenes), n), dtype=bool)
        for i, s in enumerate(scenes):
            if s.past_len != tp or s.future_len != t:
                raise ValueError(f"scene {s.scene_id}: lengths differ from the rest of the batch")
            past[i, : s.num_agents] = s.past()
            future[i, : s.num_agents] = s.future()
            mask[i, : s.num_agents] = True
        return cls(past, future, mask, [s.scene_id for s in scenes])

    @property
    def num_scenes(self) -> int:
        return self.past.shape[0]


def rotate_batch(batch: SceneBatch, theta_max: float, rng: np.random.Generator) -> SceneBatch:
    """Batched :func:`rotate_augment`: one angle per scene, about that scene's past centroid."""
    if not 0 <= theta_max <= 180:
        raise ValueError(f"theta_max must lie in [0, 180] degrees, got {theta_max}")
    if theta_max == 0:
        return batch
    th = np.radians(rng.uniform(0.0, theta_max, size=batch.num_scenes))
    cos, sin = np.cos(th), np.sin(th)
    rot = np.stack([np.stack([cos, -sin], -1), np.stack([sin, cos], -1)], -2)  # [S, 2, 2]
    w = batch.mask[:, :, None, None].astype(np.float64)
    centroid = (batch.past * w).sum(axis=(1, 2)) / (w.sum(axis=(1, 2)) * batch.past.shape[2])  # [S, 2]
    c = centroid[:, None, None, :]

    def turn(x):
        out = np.einsum("snti,sji->sntj", x - c, rot) + c
        return (out * w).astype(batch.past.dtype)

    return SceneBatch(turn(batch.past), turn(batch.future), batch.mask, batch.scene_ids)
