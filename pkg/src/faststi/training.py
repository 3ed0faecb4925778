"""Imputation-target masking, the denoising objective and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, Normalizer, fit_train_normalizer, split_and_window
from .graph import RoadGraph, graph_from_distances
from .model import ImputationTask, ModelConfig, ModelParams, init_params, loss_and_grad, loss_value, make_task, \
    save_checkpoint
from .schedule import TrainingSchedule, default_training_schedule

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class MaskSpec:
    strategy: str = "block"
    point_rate: float = 0.25
    block_base_rate: float = 0.05
    failure_prob: float = 0.0015
    min_steps: int = 12
    max_steps: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("block", "point"):
            raise ValueError(f"unknown masking strategy {self.strategy!r}")
        for name in ("point_rate", "block_base_rate", "failure_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 1 <= self.min_steps <= self.max_steps:
            raise ValueError("need 1 <= min_steps <= max_steps")


def make_targets(observed, observed_mask, spec: MaskSpec, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Choose imputation targets among the observed entries.

    Arrays are (..., L, N) with time on the second-to-last axis. Returns
    ``(target_mask, conditioning_mask)``.
    """
    rng = np.random.default_rng(spec.seed if rng is None else rng)
    observed_mask = np.asarray(observed_mask, dtype=bool)
    shape = observed_mask.shape
    if spec.strategy == "point":
        target = rng.random(shape) < spec.point_rate
    else:
        target = rng.random(shape) < spec.block_base_rate
        starts = rng.random(shape) < spec.failure_prob
        if starts.any():
            flat = target.reshape(-1, *shape[-2:])
            idx = np.argwhere(starts.reshape(flat.shape))
            durations = rng.integers(spec.min_steps, spec.max_steps + 1, len(idx))
            for (m, s, n), d in zip(idx, durations):
                flat[m, s:s + d, n] = True
            target = flat.reshape(shape)
    target &= observed_mask
    return target, observed_mask & ~target


def expected_block_fraction(spec: MaskSpec, length: int) -> float:
    """Exact expected target fraction of a fully observed block-masked series of ``length`` steps."""
    d = np.arange(spec.min_steps, spec.max_steps + 1)
    lags = np.arange(length)
    # probability that a failure starting ``lag`` steps earlier still covers the position
    survive = np.array([(d > lag).mean() for lag in lags])
    per_lag_miss = 1.0 - spec.failure_prob * survive
    not_covered = np.cumprod(per_lag_miss)  # position t sees lags 0..t
    return float(np.mean(1.0 - (1.0 - spec.block_base_rate) * not_covered))


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    sequence_length: int = 24
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    schedule: TrainingSchedule = field(default_factory=default_training_schedule, repr=False)
    seed: int = 0
    train_stride: int = 1
    ratios: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        for name in ("batch_size", "sequence_length", "train_stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("epochs, learning_rate and weight_decay must be non-negative")


class AdamW:
    """Adam moments with decoupled weight decay."""

    def __init__(self, lr=1e-3, weight_decay=1e-6, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict = {}
        self.v: dict = {}

    def update(self, params: ModelParams, grads: ModelParams) -> ModelParams:
        if self.lr == 0.0:
            self.step_count += 1
            return params
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.step_count, 1.0 - b2 ** self.step_count
        for k, p in params.items():
            g = grads[k]
            m = self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            p -= self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)
        return params


def diffuse(x0, noise, t, alpha_bars):
    """Forward process sqrt(abar_t) x0 + sqrt(1 - abar_t) noise, one t per window."""
    ab = np.asarray(alpha_bars)[np.asarray(t, dtype=int)].reshape(-1, *([1] * (np.ndim(x0) - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def train_step(task: ImputationTask, params: ModelParams, config: ModelConfig, schedule: TrainingSchedule,
               optimizer: AdamW, rng) -> float:
    """One gradient step on a batch of windows whose targets are already chosen."""
    x0 = np.asarray(task.observed, dtype=np.float64)
    x0 = x0[None] if x0.ndim == 2 else x0
    t = rng.integers(0, schedule.T, x0.shape[0])
    noise = rng.standard_normal(x0.shape)
    loss, grads = loss_and_grad(params, config, task, t, noise, x0, schedule.alpha_bars)
    if not np.isfinite(loss):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise TrainingError(f"non-finite loss {loss} at t={t.tolist()}; non-finite gradients in {bad[:5]}")
    optimizer.update(params, grads)
    return loss


@dataclass
class TrainResult:
    params: ModelParams
    curve: list
    best_epoch: int | None
    normalizer: Normalizer

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for row in self.curve:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])


def _window_tasks(values, mask, windows, spec: MaskSpec, graph: RoadGraph, rng):
    x = windows.gather(values)
    om = windows.gather(mask)
    target, _ = make_targets(x, om, spec, rng)
    return make_task(np.where(om, x, 0.0), om, target, graph)


def train_loop(dataset: Dataset, train: TrainConfig, model: ModelConfig, masks: MaskSpec,
               graph: RoadGraph | None = None, params: ModelParams | None = None,
               checkpoint_path=None, extra: dict | None = None) -> TrainResult:
    """Train on the dataset's train split, keeping the best validation parameters."""
    graph = graph or graph_from_distances(dataset.distances)
    normalizer = fit_train_normalizer(dataset, train.ratios)
    values = np.where(dataset.observed_mask, normalizer.normalize(dataset.values), 0.0)
    windows = split_and_window(dataset, train.sequence_length, train.ratios, train.train_stride)
    rng = np.random.default_rng(train.seed)
    params = init_params(model, seed=train.seed) if params is None else params.copy()
    optimizer = AdamW(train.learning_rate, train.weight_decay)
    schedule = train.schedule

    val_rng = np.random.default_rng([train.seed, 1])
    val_task = _window_tasks(values, dataset.observed_mask, windows["val"], masks, graph, val_rng)
    val_x0 = np.asarray(val_task.observed)
    val_t = val_rng.integers(0, schedule.T, val_x0.shape[0])
    val_noise = val_rng.standard_normal(val_x0.shape)

    best, best_epoch, best_params, curve = np.inf, None, params.copy(), []
    starts = windows["train"].starts
    for epoch in range(train.epochs):
        order = rng.permutation(len(starts))
        losses = []
        for lo in range(0, len(order), train.batch_size):
            sel = windows["train"]
            batch = type(sel)(sel.split, sel.start, sel.stop, sel.length, starts[order[lo:lo + train.batch_size]])
            task = _window_tasks(values, dataset.observed_mask, batch, masks, graph, rng)
            losses.append(train_step(task, params, model, schedule, optimizer, rng))
        val = loss_value(params, model, val_task, val_t, val_noise, val_x0, schedule.alpha_bars)
        curve.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val})
        log.info("epoch %d train %.4f val %.4f", epoch, curve[-1]["train_loss"], val)
        if val < best:
            best, best_epoch, best_params = val, epoch, params.copy()
            if checkpoint_path is not None:
                _save(checkpoint_path, best_params, model, train, masks, normalizer, extra)
    if checkpoint_path is not None and best_epoch is None:
        _save(checkpoint_path, best_params, model, train, masks, normalizer, extra)
    return TrainResult(best_params, curve, best_epoch, normalizer)


def _save(path, params, model, train, masks, normalizer, extra):
    doc = {"schedule": train.schedule.to_dict(), "normalizer": normalizer.to_dict(),
           "mask": asdict(masks), "sequence_length": train.sequence_length, "ratios": list(train.ratios)}
    doc.update(extra or {})
    save_checkpoint(path, params, model, doc)
