"""Triplet batches, Adagrad, the training step and loop, and a gradient check.

Random streams. Every step derives its generators from
``SeedSequence([seed, step])``: child 0 builds the batch, child 1 drives the
loss (itself split into dropout and sampling streams). Parameter init uses
``SeedSequence([seed, INIT_STREAM])``. A run resumed from a checkpoint at
step s therefore replays exactly what an uninterrupted run would do.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import ProjectionConfig, synth_view_pairs
from .data import Dataset
from .errors import InsufficientData, NonFiniteLoss
from .losses import LossConfig, loss_and_grads
from .model import (ModelConfig, ModelParams, ema_decay_at, ema_update, init_params, load_checkpoint,
                    save_checkpoint, update_batch_norm)
from .skeleton import pairwise_np_mpjpe

log = logging.getLogger(__name__)

INIT_STREAM = 2**31 - 1
METRIC_FIELDS = ("step", "loss_ratio", "loss_positive", "loss_prior", "loss_total", "a", "b")


@dataclass
class TrainConfig:
    """Every training knob; angles are in degrees."""

    batch_size: int = 256
    learning_rate: float = 0.02
    steps: int = 1000
    seed: int = 0
    augmentation: bool = False
    mix_ratio: float = 0.5
    mode: str = "pr-vipe"
    dim: int = 16
    width: int = 1024
    dropout: float = 0.3
    ema_decay: float = 0.9999
    adagrad_eps: float = 1e-8
    # loss
    beta: float = 2.0
    kappa: float = 0.1
    samples: int = 20
    w_ratio: float = 1.0
    w_positive: float = 0.005
    w_prior: float = 0.001
    prob_lo: float = 0.05
    prob_hi: float = 0.95
    prob_bounds: str = "rescale"
    mining_estimator: str = "paired"
    # camera augmentation
    camera_distance: float = 3.0
    azimuth_deg: float = 180.0
    elevation_deg: float = 30.0
    roll_deg: float = 30.0
    # bookkeeping
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size < 4:
            raise ValueError("batch_size must be at least 4")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must be in [0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        # validate the derived configs eagerly
        self.loss, self.model, self.projection  # noqa: B018

    @property
    def loss(self) -> LossConfig:
        return LossConfig(beta=self.beta, kappa=self.kappa, samples=self.samples, w_ratio=self.w_ratio,
                          w_positive=self.w_positive, w_prior=self.w_prior,
                          prob_range=(self.prob_lo, self.prob_hi), prob_bounds=self.prob_bounds,
                          mining_estimator=self.mining_estimator)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(width=self.width, dim=self.dim, dropout=self.dropout, mode=self.mode)

    @property
    def projection(self) -> ProjectionConfig:
        return ProjectionConfig.from_degrees(self.camera_distance, self.azimuth_deg,
                                             self.elevation_deg, self.roll_deg)

    @property
    def projected_pairs(self) -> int:
        return int(round(self.mix_ratio * self.batch_size)) if self.augmentation else 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TripletBatch:
    """Anchor/positive 2D pairs that share a 3D pose; the batch is its own negative pool.

    ``pose_ids`` index the dataset's frames and let the match test use a
    precomputed NP-MPJPE table; ``projected`` marks camera-augmented pairs.
    """

    anchors: np.ndarray
    positives: np.ndarray
    poses3d: np.ndarray
    pose_ids: np.ndarray | None = None
    projected: np.ndarray | None = None

    def __len__(self):
        return len(self.anchors)

    def pose_distances(self, table: np.ndarray | None = None) -> np.ndarray:
        if table is not None and self.pose_ids is not None:
            return table[np.ix_(self.pose_ids, self.pose_ids)]
        return pairwise_np_mpjpe(self.poses3d)

    def nonmatch_mask(self, kappa: float, table: np.ndarray | None = None) -> np.ndarray:
        """``(N, 2N)`` mask of candidates (anchors then positives) not matching each anchor."""
        nonmatch = self.pose_distances(table) > kappa
        return np.concatenate([nonmatch, nonmatch], axis=1)


class MatchTable:
    """Lazily computed NP-MPJPE table between all frames of a dataset."""

    def __init__(self, dataset: Dataset, max_frames: int = 4000):
        self.dataset = dataset
        self.max_frames = max_frames
        self._table = None

    @property
    def table(self):
        if self._table is None and len(self.dataset.frames) <= self.max_frames:
            self._table = pairwise_np_mpjpe(self.dataset.frame_pose3d)
        return self._table


def build_batch(dataset: Dataset, rng: np.random.Generator, config: TrainConfig) -> TripletBatch:
    """Sample N triplet anchors/positives.

    The first ``round(mix_ratio * N)`` slots (only with augmentation on) are
    two random projections of a 3D pose; the remaining slots pair two
    different stored camera views of one frame.
    """
    n = config.batch_size
    n_proj = config.projected_pairs
    n_stored = n - n_proj
    n_frames = len(dataset.frames)
    if n_frames == 0:
        raise InsufficientData("dataset is empty")
    multi = np.array([f for f, v in enumerate(dataset.views) if len(v) >= 2], dtype=np.int64)
    if n_stored and len(multi) == 0:
        raise InsufficientData("no frame has two camera views; enable augmentation with mix_ratio=1")

    ids = np.empty(n, dtype=np.int64)
    anchors = np.empty((n,) + dataset.pose2d.shape[1:])
    positives = np.empty_like(anchors)
    if n_proj:
        proj_ids = rng.choice(n_frames, n_proj, replace=n_proj > n_frames)
        ids[:n_proj] = proj_ids
        anchors[:n_proj], positives[:n_proj] = synth_view_pairs(
            dataset.frame_pose3d[proj_ids], rng, config.projection)
    if n_stored:
        pool = multi if n_proj == 0 else np.setdiff1d(multi, ids[:n_proj]) if len(multi) - n_proj >= n_stored else multi
        stored = rng.choice(pool, n_stored, replace=n_stored > len(pool))
        ids[n_proj:] = stored
        for slot, frame in enumerate(stored, start=n_proj):
            views = dataset.views[frame]
            i, j = rng.choice(len(views), 2, replace=False)
            anchors[slot] = dataset.pose2d[views[i]]
            positives[slot] = dataset.pose2d[views[j]]
    projected = np.arange(n) < n_proj
    return TripletBatch(anchors, positives, dataset.frame_pose3d[ids], ids, projected)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    """Adagrad accumulators (sum of squared gradients) per weight."""

    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, eps: float = 1e-8) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.weights.items()}, eps)


def adagrad_update(params: ModelParams, grads: dict, state: OptimizerState, lr: float) -> None:
    for name, g in grads.items():
        acc = state.accumulators[name]
        acc += g * g
        params.weights[name] = params.weights[name] - lr * g / np.sqrt(acc + state.eps)


def step_rngs(seed: int, step: int):
    batch_ss, loss_ss = np.random.SeedSequence([seed, step]).spawn(2)
    return np.random.default_rng(batch_ss), np.random.default_rng(loss_ss)


def train_step(params: ModelParams, opt_state: OptimizerState, batch: TripletBatch, config: TrainConfig,
               rng: np.random.Generator, step: int = 0, match_table: np.ndarray | None = None):
    """One optimization step; ``params`` and ``opt_state`` are updated in place and returned."""
    loss_cfg = config.loss
    nonmatch = batch.nonmatch_mask(loss_cfg.kappa, match_table)
    terms, grads, aux = loss_and_grads(batch, params, loss_cfg, rng, nonmatch)
    finite = np.isfinite(terms.total) and all(np.all(np.isfinite(g)) for g in grads.values())
    if not finite:
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NonFiniteLoss(f"step {step}: loss={terms.total!r}, non-finite gradients in {bad}")
    update_batch_norm(params, aux["stats"])
    adagrad_update(params, grads, opt_state, config.learning_rate)
    ema_update(params, ema_decay_at(step, config.ema_decay))
    metrics = {"step": step, **terms.as_dict(), "a": params.a, "b": params.b}
    return params, opt_state, metrics


def initial_params(config: TrainConfig) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, INIT_STREAM]))
    return init_params(config.model, rng)


def _write_metrics(path: Path, rows):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([row["step"], row["loss_ratio"], row["loss_positive"], row["loss_prior"],
                             row["loss_total"], row["a"], row["b"]])


def save_training_state(path, params, opt_state, step, config: TrainConfig, history=None):
    extra = {"step": step, "train_config": config.to_dict()}
    if history is not None:
        extra["history"] = history
    return save_checkpoint(params, path, optimizer=opt_state.accumulators, extra=extra)


def train_loop(dataset: Dataset, config: TrainConfig, out_dir=None, resume_from=None, stop_after=None):
    """Run ``config.steps`` steps (or until ``stop_after``); returns ``(params, history)``.

    With ``out_dir``, writes ``metrics.csv``, periodic ``checkpoint.npz`` and
    a final ``model.npz``. Inference should use ``params.ema_view()``.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume_from is not None:
        params, opt, meta = load_checkpoint(resume_from)
        opt_state = OptimizerState(opt, config.adagrad_eps)
        start = int(meta["extra"]["step"])
        history = list(meta["extra"].get("history", []))
    else:
        params = initial_params(config)
        opt_state = OptimizerState.zeros_like(params, config.adagrad_eps)
        start, history = 0, []
    table = MatchTable(dataset).table if config.steps > start else None
    last = config.steps if stop_after is None else min(config.steps, stop_after)
    t0 = time.perf_counter()
    for step in range(start, last):
        batch_rng, loss_rng = step_rngs(config.seed, step)
        batch = build_batch(dataset, batch_rng, config)
        params, opt_state, metrics = train_step(params, opt_state, batch, config, loss_rng, step, table)
        history.append(metrics)
        done = step + 1
        if config.log_every and done % config.log_every == 0:
            log.info("step %d loss %.4f (ratio %.4f pos %.4f prior %.4f) a=%.3f b=%.3f [%.1fs]",
                     done, metrics["loss_total"], metrics["loss_ratio"], metrics["loss_positive"],
                     metrics["loss_prior"], metrics["a"], metrics["b"], time.perf_counter() - t0)
        if out_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            save_training_state(out_dir / "checkpoint.npz", params, opt_state, done, config, history)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_metrics(out_dir / "metrics.csv", history)
        save_training_state(out_dir / "checkpoint.npz", params, opt_state, last, config, history)
        save_checkpoint(params, out_dir / "model.npz", extra={"step": last, "train_config": config.to_dict()})
    return params, history
