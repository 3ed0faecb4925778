"""Datasets, chronological splits, windows, normalisation and a synthetic generator."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import build_transitions, gaussian_kernel_adjacency, read_distances_csv, write_matrix_csv

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    values: np.ndarray
    observed_mask: np.ndarray
    node_ids: list
    timestamps: np.ndarray
    distances: np.ndarray
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed_mask = np.asarray(self.observed_mask, dtype=bool)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape != self.observed_mask.shape:
            raise DataError("values and observed_mask must be matching (T, N) arrays")
        if len(self.node_ids) != self.values.shape[1]:
            raise DataError("node_ids length does not match the number of columns")
        if self.timestamps.shape != (self.values.shape[0],):
            raise DataError("one timestamp per row is required")
        if self.timestamps.size > 1:
            steps = np.diff(self.timestamps)
            if np.any(steps <= 0):
                raise DataError("timestamps must be strictly increasing")
            if np.any(steps != steps[0]):
                raise DataError("timestamps must have a constant interval")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def missing_fraction(self) -> float:
        return float(1.0 - self.observed_mask.mean())


def load_csv_dataset(values_path, distances_path, missing_marker: float = 0.0) -> Dataset:
    """Read ``timestamp,<node ids...>`` rows plus a distance file.

    Entries equal to ``missing_marker`` (and empty or non-finite cells) are
    treated as natively missing.
    """
    values_path = Path(values_path)
    with open(values_path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise DataError(f"{values_path}: need a header and at least one data row")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise DataError(f"{values_path}: header must be 'timestamp' followed by node ids")
    node_ids = header[1:]
    n = len(node_ids)
    ts, vals = [], np.empty((len(rows) - 1, n))
    for i, r in enumerate(rows[1:]):
        if len(r) != n + 1:
            raise DataError(f"{values_path}: row {i + 2} has {len(r) - 1} values, expected {n}")
        try:
            ts.append(int(r[0]))
            vals[i] = [float(v) if v.strip() else math.nan for v in r[1:]]
        except ValueError as exc:
            raise DataError(f"{values_path}: row {i + 2}: {exc}") from None
    mask = np.isfinite(vals) & (vals != missing_marker)
    if missing_marker == 0.0 and np.any(vals == 0.0):
        log.warning("%s: %d zero readings treated as missing (missing_marker=0.0)",
                    values_path, int(np.sum(vals == 0.0)))
    vals = np.where(np.isfinite(vals), vals, missing_marker)
    distances = read_distances_csv(distances_path, node_ids)
    return Dataset(vals, mask, node_ids, np.array(ts), distances)


def save_csv_dataset(dataset: Dataset, values_path, distances_path) -> None:
    with open(values_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *dataset.node_ids])
        for t, row in zip(dataset.timestamps, dataset.values):
            w.writerow([int(t), *[repr(float(v)) for v in row]])
    write_matrix_csv(distances_path, dataset.distances, dataset.node_ids)


# -- splits and windows ------------------------------------------------------

@dataclass(frozen=True)
class WindowSet:
    split: str
    start: int
    stop: int
    length: int
    starts: np.ndarray

    def __len__(self) -> int:
        return len(self.starts)

    def gather(self, array) -> np.ndarray:
        """Stack windows of ``array`` (T, ...) into (n_windows, L, ...)."""
        array = np.asarray(array)
        return np.stack([array[s:s + self.length] for s in self.starts]) if len(self.starts) else \
            np.empty((0, self.length, *array.shape[1:]), dtype=array.dtype)


def split_bounds(n_steps: int, ratios=(0.7, 0.1, 0.2)) -> dict:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    b1 = int(round(n_steps * ratios[0]))
    b2 = int(round(n_steps * (ratios[0] + ratios[1])))
    return {"train": (0, b1), "val": (b1, b2), "test": (b2, n_steps)}


def split_and_window(dataset_or_steps, L: int, ratios=(0.7, 0.1, 0.2), train_stride: int = 1) -> dict:
    """Chronological splits; stride-``train_stride`` windows in train, non-overlapping elsewhere."""
    n = dataset_or_steps.n_steps if isinstance(dataset_or_steps, Dataset) else int(dataset_or_steps)
    if L < 1 or L > n:
        raise DataError(f"window length {L} does not fit {n} timestamps")
    out = {}
    for name, (lo, hi) in split_bounds(n, ratios).items():
        if hi - lo < L:
            raise DataError(f"window length {L} exceeds the {name} split ({hi - lo} timestamps)")
        stride = train_stride if name == "train" else L
        out[name] = WindowSet(name, lo, hi, L, np.arange(lo, hi - L + 1, stride))
    return out


# -- normalisation -------------------------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values, mask) -> "Normalizer":
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        cnt = mask.sum(axis=0)
        mean = np.where(cnt > 0, (values * mask).sum(axis=0) / np.maximum(cnt, 1), 0.0)
        var = np.where(cnt > 1, (((values - mean) * mask) ** 2).sum(axis=0) / np.maximum(cnt, 1), 1.0)
        std = np.sqrt(var)
        std[std < 1e-8] = 1.0
        return cls(mean, std)

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "Normalizer":
        return cls(np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Normalizer":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_train_normalizer(dataset: Dataset, ratios=(0.7, 0.1, 0.2)) -> Normalizer:
    lo, hi = split_bounds(dataset.n_steps, ratios)["train"]
    return Normalizer.fit(dataset.values[lo:hi], dataset.observed_mask[lo:hi])


# -- synthetic data ------------------------------------------------------------

def synth_generate(n_nodes: int, n_steps: int, seed: int = 0, coupling: float = 0.3,
                   noise: float = 0.05, interval: int = 300) -> Dataset:
    """Sensors on a random geometric graph carrying travelling sinusoidal waves.

    Each node sums 2-3 shared-period sinusoids whose phases follow the node's
    position (so nearby sensors are related). Every step mixes in ``coupling``
    of the neighbours' previous values through the forward transition matrix,
    and Gaussian noise with standard deviation ``noise`` times the node's
    amplitude is added.
    """
    if n_nodes < 2:
        raise DataError("synthetic data needs at least two nodes")
    if n_steps < 1:
        raise DataError("n_steps must be positive")
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.0, 10.0, (n_nodes, 2))
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    fwd, _ = build_transitions(gaussian_kernel_adjacency(dist))

    periods = np.sort(rng.uniform(12.0, 96.0, 3))[::-1]
    directions = rng.normal(size=(3, 2))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    wavelengths = rng.uniform(15.0, 40.0, 3)
    n_comp = rng.integers(2, 4, n_nodes)
    amps = rng.uniform(0.5, 1.5, (n_nodes, 3)) * (np.arange(3)[None, :] < n_comp[:, None])
    phases = 2 * np.pi * (pos @ directions.T) / wavelengths + rng.normal(0.0, 0.3, (n_nodes, 3))
    offsets = rng.uniform(40.0, 60.0, n_nodes)

    t = np.arange(n_steps)[:, None, None]
    base = offsets + (amps * np.sin(2 * np.pi * t / periods + phases)).sum(-1)
    y = np.empty_like(base)
    y[0] = base[0]
    for k in range(1, n_steps):
        y[k] = (1.0 - coupling) * base[k] + coupling * (fwd @ y[k - 1])
    scale = amps.sum(axis=1)
    y = y + rng.normal(size=y.shape) * (noise * scale)

    meta = {"positions": pos.tolist(), "periods": periods.tolist(), "amplitudes": amps.tolist(),
            "phases": phases.tolist(), "offsets": offsets.tolist(), "coupling": coupling,
            "noise": noise, "seed": seed}
    return Dataset(y, np.ones_like(y, dtype=bool), [f"s{i}" for i in range(n_nodes)],
                   np.arange(n_steps, dtype=np.int64) * interval, dist, meta)
