"""Reverse-process samplers: DDPM, DDIM and the pseudo-numerical FastSTI solvers.

A predictor is any callable ``predictor(x_t, task, t) -> eps`` returning an
array shaped like ``x_t``; ``t`` is a (possibly fractional) training storage
index, and -1 denotes clean data.

All pseudo-numerical methods share :func:`transfer`; they differ only in how
the noise estimate fed to it is assembled (the "gradient part").
"""

from __future__ import annotations

import csv
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import ImputationTask
from .schedule import AlignedSchedule, TrainingSchedule

METHODS = ("ddpm", "ddim", "fastSTI2", "fastSTI4")
_WARMUP = {"fastSTI2": 2, "fastSTI4": 3}
_MIN_STEPS = {"ddpm": 1, "ddim": 1, "fastSTI2": 2, "fastSTI4": 4}


class SamplerError(ValueError):
    pass


# -- transfer and gradient parts ---------------------------------------------

def transfer(x_t, eps, abar_t: float, abar_prev: float) -> np.ndarray:
    """Move ``x_t`` from noise level ``abar_t`` to ``abar_prev`` along ``eps``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_t.shape != eps.shape:
        raise SamplerError(f"shape mismatch: state {x_t.shape} vs noise {eps.shape}")
    if not (0.0 < abar_t <= 1.0 and 0.0 < abar_prev <= 1.0):
        raise SamplerError(f"noise levels must lie in (0, 1], got {abar_t}, {abar_prev}")
    a, ap = abar_t, abar_prev
    x_coef = np.sqrt(ap / a)
    e_coef = (ap - a) / (np.sqrt(a) * (np.sqrt((1.0 - ap) * a) + np.sqrt((1.0 - a) * ap)))
    return x_coef * x_t - e_coef * eps


class SolverHistory:
    """The three most recent noise estimates, newest first."""

    def __init__(self, items: Sequence[np.ndarray] = ()):
        self._items = deque(items, maxlen=3)

    def push(self, e: np.ndarray) -> None:
        self._items.appendleft(e)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> np.ndarray:
        return self._items[i]


def plms2_grad(history: SolverHistory, e_t) -> np.ndarray:
    if len(history) < 1:
        raise SamplerError("PLMS2 needs one previous noise estimate")
    return 0.5 * (3.0 * e_t - history[0])


def plms4_grad(history: SolverHistory, e_t) -> np.ndarray:
    if len(history) < 3:
        raise SamplerError(f"PLMS4 needs three previous noise estimates, history has {len(history)}")
    return (55.0 * e_t - 59.0 * history[0] + 37.0 * history[1] - 9.0 * history[2]) / 24.0


# -- single steps ------------------------------------------------------------

def ddim_step(x_t, predictor, task, abar_t, abar_prev, t) -> np.ndarray:
    return transfer(x_t, predictor(x_t, task, t), abar_t, abar_prev)


def _ancestral(x_t, eps, a, ap, noise):
    """Posterior step between levels ``a`` < ``ap``; ``noise=None`` drops the random term."""
    alpha = a / ap
    mean = (x_t - (1.0 - alpha) / np.sqrt(1.0 - a) * eps) / np.sqrt(alpha)
    if noise is None:
        return mean
    var = (1.0 - ap) / (1.0 - a) * (1.0 - alpha)
    return mean + np.sqrt(var) * noise


def ddpm_step(x_t, predictor, task, schedule: TrainingSchedule, t: int, rng) -> np.ndarray:
    """Standard ancestral step from step ``t`` (1-based) to ``t - 1``; no noise at t = 1."""
    if not 1 <= t <= schedule.T:
        raise SamplerError(f"t must lie in 1..{schedule.T}, got {t}")
    a = schedule.alpha_bars[t - 1]
    ap = schedule.alpha_bars[t - 2] if t > 1 else 1.0
    eps = predictor(x_t, task, t - 1)
    noise = rng.standard_normal(np.shape(x_t)) if t > 1 else None
    return _ancestral(x_t, eps, a, ap, noise)


def ph2_step(x_t, predictor, task, abar_t, abar_prev, t, t_prev):
    """Pseudo Heun step; returns the new state and the averaged noise estimate."""
    e1 = predictor(x_t, task, t)
    x1 = transfer(x_t, e1, abar_t, abar_prev)
    e2 = predictor(x1, task, t_prev)
    e = 0.5 * (e1 + e2)
    return transfer(x_t, e, abar_t, abar_prev), e


def prk4_step(x_t, predictor, task, abar_t, abar_mid, abar_prev, t, t_mid, t_prev):
    """Pseudo Runge-Kutta step; returns the new state and the (1,2,2,1)/6 noise estimate."""
    e1 = predictor(x_t, task, t)
    x1 = transfer(x_t, e1, abar_t, abar_mid)
    e2 = predictor(x1, task, t_mid)
    x2 = transfer(x_t, e2, abar_t, abar_mid)
    e3 = predictor(x2, task, t_mid)
    x3 = transfer(x_t, e3, abar_t, abar_prev)
    e4 = predictor(x3, task, t_prev)
    e = (e1 + 2.0 * e2 + 2.0 * e3 + e4) / 6.0
    return transfer(x_t, e, abar_t, abar_prev), e


# -- time grids ----------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Noise levels visited by a sampler, noisiest first.

    ``levels`` and ``times`` have S + 1 entries and end at clean data
    (level 1, time -1); ``mid_levels``/``mid_times`` hold the S half steps.
    """

    levels: np.ndarray
    times: np.ndarray
    mid_levels: np.ndarray
    mid_times: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.levels) - 1


def _level_to_time(levels, training: TrainingSchedule) -> np.ndarray:
    # inverse of the sqrt-abar interpolation, with index -1 standing for abar = 1
    ext = np.sqrt(np.concatenate([[1.0], training.alpha_bars]))
    idx = np.arange(-1, training.T, dtype=np.float64)
    return np.interp(np.sqrt(levels), ext[::-1], idx[::-1])


def build_grid(training: TrainingSchedule, steps: int, aligned: AlignedSchedule | None = None) -> TimeGrid:
    if aligned is not None:
        if steps != aligned.T_acc:
            raise SamplerError(f"aligned schedule has {aligned.T_acc} steps, sampler asked for {steps}")
        levels = np.concatenate([aligned.phi_bars[::-1], [1.0]])
        times = np.concatenate([aligned.t_aligned[::-1], [-1.0]])
        mid_levels = (0.5 * (np.sqrt(levels[:-1]) + np.sqrt(levels[1:]))) ** 2
        mid_times = _level_to_time(mid_levels, training)
    else:
        if not 1 <= steps <= training.T:
            raise SamplerError(f"steps must lie in 1..{training.T}, got {steps}")
        idx = np.round(np.linspace(training.T - 1, 0, steps)).astype(np.float64)
        times = np.concatenate([idx, [-1.0]])
        levels = training.abar_at(times)
        mid_times = 0.5 * (times[:-1] + times[1:])
        mid_levels = training.abar_at(mid_times)
    return TimeGrid(levels, times, mid_levels, mid_times)


# -- orchestration -------------------------------------------------------------

@dataclass
class SamplerConfig:
    method: str = "fastSTI4"
    steps: int = 50
    aligned: AlignedSchedule | None = None
    warmup_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise SamplerError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.steps < _MIN_STEPS[self.method]:
            raise SamplerError(f"{self.method} needs at least {_MIN_STEPS[self.method]} steps, got {self.steps}")
        if self.warmup_steps is None and self.method in _WARMUP:
            self.warmup_steps = _WARMUP[self.method]
        if self.method in _WARMUP:
            need = 1 if self.method == "fastSTI2" else 3
            if self.warmup_steps < need:
                raise SamplerError(f"{self.method} needs at least {need} warm-up steps")
            if self.warmup_steps > self.steps:
                raise SamplerError("warm-up steps exceed the total number of steps")
        if self.aligned is not None and self.steps != self.aligned.T_acc:
            raise SamplerError(f"aligned schedule has {self.aligned.T_acc} steps, config asks for {self.steps}")

    def expected_calls(self) -> int:
        """Predictor evaluations per trajectory."""
        s = self.steps
        if self.method == "fastSTI2":
            return 2 * self.warmup_steps + (s - self.warmup_steps)
        if self.method == "fastSTI4":
            return 4 * self.warmup_steps + (s - self.warmup_steps)
        return s


@dataclass
class SamplerTrace:
    rows: list = field(default_factory=list)

    def record(self, step, t, level, x, e):
        self.rows.append({
            "step": step, "t": float(t), "abar": float(level),
            "state_norm": float(np.linalg.norm(x)),
            "eps_norm": float(np.linalg.norm(e)) if e is not None else float("nan"),
        })

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "t", "abar", "state_norm", "eps_norm"])
            w.writeheader()
            w.writerows(self.rows)


class _Noise:
    """Standard normal draws from one generator, or one generator per leading row."""

    def __init__(self, rng):
        self.rngs = rng if isinstance(rng, (list, tuple)) else None
        self.rng = None if self.rngs is not None else np.random.default_rng(rng)

    def __call__(self, shape):
        if self.rngs is None:
            return self.rng.standard_normal(shape)
        if shape[0] % len(self.rngs):
            raise SamplerError("leading axis is not divisible by the number of generators")
        chunk = shape[0] // len(self.rngs)
        return np.concatenate([g.standard_normal((chunk, *shape[1:])) for g in self.rngs])


def integrate(x, predictor, task, grid: TimeGrid, method: str, warmup_steps: int | None = None,
              noise: Callable | None = None, after_step: Callable | None = None,
              trace: SamplerTrace | None = None) -> np.ndarray:
    """Run ``method`` over ``grid`` starting from state ``x`` at ``grid.levels[0]``.

    ``after_step(x, level)`` may project the state after every step; ``noise``
    supplies ancestral noise for ``ddpm``.
    """
    if warmup_steps is None:
        warmup_steps = _WARMUP.get(method, 0)
    lv, ts = grid.levels, grid.times
    history = SolverHistory()
    for i in range(grid.steps):
        a, ap, t, tp = lv[i], lv[i + 1], ts[i], ts[i + 1]
        if method == "ddim":
            e = predictor(x, task, t)
            x = transfer(x, e, a, ap)
        elif method == "ddpm":
            e = predictor(x, task, t)
            last = i == grid.steps - 1
            x = _ancestral(x, e, a, ap, None if last else noise(x.shape))
        elif i < warmup_steps:
            if method == "fastSTI2":
                x, e = ph2_step(x, predictor, task, a, ap, t, tp)
            else:
                x, e = prk4_step(x, predictor, task, a, grid.mid_levels[i], ap, t, grid.mid_times[i], tp)
            history.push(e)
        else:
            raw = predictor(x, task, t)
            e = plms2_grad(history, raw) if method == "fastSTI2" else plms4_grad(history, raw)
            x = transfer(x, e, a, ap)
            history.push(raw)
        if after_step is not None:
            x = after_step(x, ap)
        if trace is not None:
            trace.record(i, t, a, x, e)
    return x


def sample(predictor, task: ImputationTask, training: TrainingSchedule, config: SamplerConfig,
           rng=None, trace: SamplerTrace | None = None) -> np.ndarray:
    """Impute the task's target entries; every other entry is returned as observed.

    Observed entries of the working state are reset to their forward-diffused
    values after every step, with a fresh noise draw per step.
    """
    observed = np.asarray(task.observed, dtype=np.float64)
    if not np.any(task.target_mask):
        return observed.copy()
    draw = _Noise(config.seed if rng is None else rng)
    grid = build_grid(training, config.steps, config.aligned)
    cond = task.conditioning_mask

    def clamp(x, level):
        z = draw(x.shape)
        return np.where(cond, np.sqrt(level) * observed + np.sqrt(1.0 - level) * z, x)

    x = clamp(draw(observed.shape), grid.levels[0])
    x = integrate(x, predictor, task, grid, config.method, config.warmup_steps,
                  noise=draw, after_step=clamp, trace=trace)
    return np.where(task.target_mask, x, observed)


def _tile_task(task: ImputationTask, n: int) -> ImputationTask:
    def rep(a):
        a = np.asarray(a)
        a = a[None] if a.ndim == 2 else a
        return np.concatenate([a] * n)

    return ImputationTask(rep(task.observed), rep(task.observed_mask), rep(task.target_mask),
                          rep(task.conditioner), task.graph)


def sample_ensemble(predictor, task: ImputationTask, training: TrainingSchedule, config: SamplerConfig,
                    n_samples: int, threads: int = 1) -> np.ndarray:
    """Draw ``n_samples`` imputations, shape (n_samples, *task.observed.shape).

    Each sample owns a generator spawned from ``config.seed``, so results do
    not depend on ``threads``.
    """
    single = np.asarray(task.observed).ndim == 2
    gens = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(n_samples)]
    threads = max(1, min(threads, n_samples))
    bounds = np.linspace(0, n_samples, threads + 1).astype(int)
    chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]

    def run(lo_hi):
        lo, hi = lo_hi
        sub = _tile_task(task, hi - lo)
        return sample(predictor, sub, training, config, rng=gens[lo:hi])

    if len(chunks) == 1:
        outs = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(len(chunks)) as ex:
            outs = list(ex.map(run, chunks))
    out = np.concatenate(outs)
    base = np.asarray(task.observed)
    base = base[None] if single else base
    return out.reshape(n_samples, *base.shape)[:, 0] if single else out.reshape(n_samples, *base.shape)
