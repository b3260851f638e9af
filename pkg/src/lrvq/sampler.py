"""Multi-modal forecasting: raw guesses, k-means reduction and best-of-K displacement errors."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import EvalConfig
from .data import Scene, SceneBatch, normalize
from .model import ModelBundle
from .tensor import Tensor


# -- k-means ---------------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray  # [K, ...] same trailing shape as the inputs
    labels: np.ndarray  # [N]
    inertia: list[float]  # objective after every assignment step
    iterations: int


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return (diff * diff).sum(axis=-1)


def farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random first center, then repeatedly the point farthest from all chosen centers."""
    chosen = [int(rng.integers(len(x)))]
    closest = _sqdist(x, x[chosen]).min(axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(closest))
        chosen.append(nxt)
        closest = np.minimum(closest, _sqdist(x, x[nxt : nxt + 1])[:, 0])
    return x[chosen].copy()


def _update(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    k = len(centroids)
    new = centroids.copy()
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, x)
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    empty = np.flatnonzero(~filled)
    if empty.size:
        # re-seed each empty cluster on the point farthest from its own centroid
        far = ((x - new[labels]) ** 2).sum(axis=1)
        order = np.argsort(-far, kind="stable")
        for j, idx in zip(empty, order):
            new[j] = x[idx]
    return new


def kmeans_reduce(guesses: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm on flattened guesses with farthest-point seeding.

    ``guesses`` is ``[N, ...]``; each guess is flattened to one vector.
    Stops at an assignment fixpoint or after ``max_iter`` updates.
    """
    guesses = np.asarray(guesses, dtype=np.float64)
    n = len(guesses)
    if not 1 <= k <= n:
        raise ValueError(f"k-means needs 1 <= K <= N, got K={k}, N={n}")
    x = guesses.reshape(n, -1)
    centroids = farthest_point_init(x, k, rng)
    labels = np.argmin(_sqdist(x, centroids), axis=1)
    inertia = [float(((x - centroids[labels]) ** 2).sum())]
    it = 0
    for it in range(1, max_iter + 1):
        centroids = _update(x, labels, centroids)
        d = _sqdist(x, centroids)
        new_labels = np.argmin(d, axis=1)
        inertia.append(float(d[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansResult(centroids.reshape((k,) + guesses.shape[1:]), labels, inertia, it)


# -- metrics ------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    """Best-of-K errors keyed by horizon length in steps."""

    ade: dict[int, float] = field(default_factory=dict)
    fde: dict[int, float] = field(default_factory=dict)


def displacement_metrics(predictions: np.ndarray, truth: np.ndarray, horizons=None) -> MetricsRecord:
    """Minimum over candidates of the average and final displacement errors.

    ``predictions`` is ``[K, T, 2]``, ``truth`` is ``[T, 2]``; each horizon ``h``
    uses the first ``h`` steps. The best candidate is chosen per metric and
    per horizon.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predictions.ndim != 3 or predictions.shape[0] < 1 or predictions.shape[1:] != truth.shape:
        raise ValueError(f"predictions {predictions.shape} do not match truth {truth.shape}")
    steps = truth.shape[0]
    horizons = [steps] if horizons is None else list(horizons)
    dist = np.linalg.norm(predictions - truth[None], axis=-1)  # [K, T]
    rec = MetricsRecord()
    for h in horizons:
        if not 1 <= h <= steps:
            raise ValueError(f"horizon {h} outside 1..{steps}")
        rec.ade[h] = float(dist[:, :h].mean(axis=1).min())
        rec.fde[h] = float(dist[:, h - 1].min())
    return rec


def horizon_steps(seconds, frame_interval: float, future_len: int) -> list[int]:
    """Convert horizons in seconds to step counts (always including the full horizon)."""
    out = []
    for s in seconds:
        h = int(math.floor(s / frame_interval + 1e-9))
        if h < 1 or h > future_len:
            raise ValueError(f"horizon {s}s is {h} steps, outside 1..{future_len}")
        out.append(h)
    return sorted(set(out) | {future_len})


# -- generation --------------------------------------------------------------------

def generate_guesses(scene: Scene, bundle: ModelBundle, n: int, rng: np.random.Generator, chunk: int = 200) -> np.ndarray:
    """``n`` independent joint samples for all agents of ``scene``: ``[n, A, T, 2]`` in scene coordinates."""
    norm_scene, state = normalize(scene, bundle.scale)
    dtype = bundle.vqvae.dtype
    batch = SceneBatch.from_scenes([norm_scene], dtype)
    with T.no_grad():
        h1 = bundle.vqvae.context(batch.past, batch.mask)
    out = []
    done = 0
    while done < n:
        m = min(chunk, n - done)
        past = np.repeat(batch.past, m, axis=0)
        mask = np.repeat(batch.mask, m, axis=0)
        h = Tensor(np.repeat(h1.data, m, axis=0))
        out.append(bundle.sample(past, mask, rng, h))
        done += m
    guesses = np.concatenate(out, axis=0)
    return state.invert(guesses.astype(np.float64))


@dataclass
class EvaluationResult:
    rows: list[dict]
    aggregate: dict[str, float]
    horizons: list[int]
    plot_rows: list[tuple] = field(default_factory=list)

    def write_table(self, path: str | Path) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        cols = list(self.rows[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.rows)

    def write_aggregate(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.aggregate.items():
                w.writerow([k, repr(v)])

    def write_plot_data(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene_id", "agent_id", "kind", "index", "step", "x", "y"])
            w.writerows(self.plot_rows)


def _metric_columns(prefix: str, rec: MetricsRecord, frame_interval: float) -> dict[str, float]:
    cols = {}
    for h in rec.ade:
        tag = f"{h * frame_interval:g}s"
        cols[f"ADE_{prefix}@{tag}"] = rec.ade[h]
        cols[f"FDE_{prefix}@{tag}"] = rec.fde[h]
    return cols


def evaluate_dataset(scenes: list[Scene], bundle: ModelBundle, cfg: EvalConfig, rng: np.random.Generator,
                     keep_plot_data: bool = False) -> EvaluationResult:
    """Best-of-K evaluation of every agent, for k-means centroids and for the first K raw guesses.

    Each scene gets its own random stream spawned from ``rng``.
    """
    cfg.validate()
    rows: list[dict] = []
    plot: list[tuple] = []
    streams = rng.spawn(len(scenes)) if scenes else []
    horizons: list[int] = []
    for scene, stream in zip(scenes, streams):
        horizons = horizon_steps(cfg.horizons, scene.frame_interval, scene.future_len)
        guesses = generate_guesses(scene, bundle, cfg.num_guesses, stream)
        for a, agent in enumerate(scene.agents):
            pool = guesses[:, a]
            km = kmeans_reduce(pool, cfg.k, stream)
            cen = displacement_metrics(km.centroids, agent.future, horizons)
            uni = displacement_metrics(pool[: cfg.k], agent.future, horizons)
            row = {"scene_id": scene.scene_id, "agent_id": agent.agent_id}
            row.update(_metric_columns("centroid", cen, scene.frame_interval))
            row.update(_metric_columns("uniform", uni, scene.frame_interval))
            rows.append(row)
            if keep_plot_data:
                for kind, trajs in (("guess", pool), ("centroid", km.centroids), ("truth", agent.future[None]),
                                    ("past", agent.past[None])):
                    for i, traj in enumerate(trajs):
                        for t, (x, y) in enumerate(traj):
                            plot.append((scene.scene_id, agent.agent_id, kind, i, t, repr(float(x)), repr(float(y))))
    aggregate = {}
    if rows:
        for key in rows[0]:
            if key not in ("scene_id", "agent_id"):
                aggregate[key] = float(np.mean([r[key] for r in rows]))
    return EvaluationResult(rows, aggregate, horizons, plot)
