"""Glue between datasets, trained predictors and samplers: windowed imputation and scoring."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Normalizer, split_bounds
from .graph import RoadGraph
from .metrics import EvalReport, evaluate
from .model import ImputationTask, make_task
from .schedule import TrainingSchedule
from .solvers import SamplerConfig, sample_ensemble
from .training import MaskSpec, make_targets


def window_starts(n_steps: int, length: int) -> np.ndarray:
    """Non-overlapping windows covering ``n_steps``; a final window is flushed to the end."""
    if n_steps < length:
        return np.array([0])
    starts = list(range(0, n_steps - length + 1, length))
    if starts[-1] + length < n_steps:
        starts.append(n_steps - length)
    return np.asarray(starts)


@dataclass
class WindowedSeries:
    """A (T, N) stretch cut into windows, in normalised units."""

    task: ImputationTask
    starts: np.ndarray
    length: int
    n_steps: int
    normalizer: Normalizer

    def stitch(self, windows) -> np.ndarray:
        """Reassemble (..., B, L, N) windows into (..., T, N); later windows win on overlap."""
        windows = np.asarray(windows)
        out = np.empty((*windows.shape[:-3], self.n_steps, windows.shape[-1]))
        for b, s in enumerate(self.starts):
            out[..., s:s + self.length, :] = windows[..., b, :, :]
        return out

    def baseline(self) -> np.ndarray:
        """Per-node linear interpolation of the conditioning entries, de-normalised."""
        return self.normalizer.denormalize(self.stitch(self.task.conditioner))


def windowed_series(values, observed_mask, target_mask, normalizer: Normalizer, graph: RoadGraph,
                    length: int) -> WindowedSeries:
    values = np.asarray(values, dtype=np.float64)
    observed_mask = np.asarray(observed_mask, dtype=bool)
    n = values.shape[0]
    length = min(length, n)
    starts = window_starts(n, length)

    def cut(a):
        return np.stack([a[s:s + length] for s in starts])

    z = np.where(observed_mask, normalizer.normalize(values), 0.0)
    task = make_task(cut(z), cut(observed_mask), cut(np.asarray(target_mask, dtype=bool)), graph)
    return WindowedSeries(task, starts, length, n, normalizer)


@dataclass
class EvalSplit:
    series: WindowedSeries
    truth: np.ndarray
    eval_mask: np.ndarray


def build_eval_split(dataset: Dataset, normalizer: Normalizer, graph: RoadGraph, spec: MaskSpec,
                     length: int = 24, ratios=(0.7, 0.1, 0.2), split: str = "test") -> EvalSplit:
    """Hide observed entries of one split according to ``spec`` and window the result.

    Targets are drawn over the whole split before windowing, so block
    failures may span window boundaries as they would in deployment.
    """
    lo, hi = split_bounds(dataset.n_steps, ratios)[split]
    values, mask = dataset.values[lo:hi], dataset.observed_mask[lo:hi]
    target, _ = make_targets(values, mask, spec, np.random.default_rng(spec.seed))
    series = windowed_series(values, mask, target, normalizer, graph, length)
    return EvalSplit(series, values, target & mask)


def impute_series(predictor, series: WindowedSeries, training: TrainingSchedule, config: SamplerConfig,
                  n_samples: int = 1, threads: int = 1) -> np.ndarray:
    """Sample imputations; returns (n_samples, T, N) in original units."""
    ens = sample_ensemble(predictor, series.task, training, config, n_samples, threads)
    return series.normalizer.denormalize(series.stitch(ens))


def score(split: EvalSplit, ensemble) -> EvalReport:
    """Median-of-ensemble point metrics, plus CRPS when there are at least two samples."""
    ensemble = np.asarray(ensemble)
    if ensemble.shape[0] >= 2:
        return evaluate(split.truth, None, split.eval_mask, ensemble=ensemble)
    return evaluate(split.truth, ensemble[0], split.eval_mask)


def time_sampler(predictor, task: ImputationTask, training: TrainingSchedule, config: SamplerConfig,
                 repeats: int = 5) -> list[float]:
    """Wall-clock seconds of ``repeats`` single-sample runs on the same batch."""
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        sample_ensemble(predictor, task, training, config, 1)
        out.append(time.perf_counter() - t0)
    return out
