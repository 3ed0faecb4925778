"""Training noise schedules and accelerated (aligned) inference schedules.

Equations index diffusion steps as t = 1..T. Arrays here are stored 0-based:
``betas[i]`` is beta_{i+1}, ``alpha_bars[i]`` is abar_{i+1}. The network's time
argument uses the storage index, so training draws ``t`` from {0, ..., T-1} and
an aligned step ``t_c`` is a fractional storage index in [0, T-1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

KINDS = ("linear", "cosine", "quadratic")

# slack for phi_bar values that coincide with an endpoint of the training range
_BRACKET_SLACK = 1e-12


class ScheduleError(ValueError):
    """Invalid schedule parameters or incompatible schedules."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrainingSchedule:
    kind: str
    beta_1: float
    beta_T: float
    T: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @classmethod
    def from_betas(cls, betas, kind: str = "custom") -> "TrainingSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("betas must be a non-empty 1-d array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ScheduleError("betas must lie in (0, 1)")
        alphas = 1.0 - betas
        return cls(
            kind=kind,
            beta_1=float(betas[0]),
            beta_T=float(betas[-1]),
            T=int(betas.size),
            betas=_frozen(betas),
            alphas=_frozen(alphas),
            alpha_bars=_frozen(np.cumprod(alphas)),
        )

    def abar_at(self, t) -> np.ndarray:
        """Noise level at a (possibly fractional) storage index.

        sqrt(abar) is interpolated linearly between adjacent integer steps, the
        same space the schedule alignment works in. Index -1 is clean data
        (abar = 1); indices are clipped to [-1, T-1].
        """
        return interp_levels(self.alpha_bars, t)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta_1": self.beta_1, "beta_T": self.beta_T, "T": self.T}


def interp_levels(alpha_bars: np.ndarray, t) -> np.ndarray:
    ext = np.sqrt(np.concatenate([[1.0], alpha_bars]))
    pos = np.clip(np.asarray(t, dtype=np.float64) + 1.0, 0.0, ext.size - 1)
    return np.interp(pos, np.arange(ext.size), ext) ** 2


def build_training_schedule(kind: str, beta_1: float, beta_T: float, T: int) -> TrainingSchedule:
    """Build the T-step training schedule.

    ``quadratic`` interpolates linearly in sqrt(beta); ``cosine`` is the
    Nichol-Dhariwal schedule with s = 0.008 and betas clipped to 0.999, whose
    endpoints are set by its shape rather than by ``beta_1``/``beta_T``.
    T = 1 yields the single value ``beta_1`` for every kind.
    """
    if kind not in KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ScheduleError(f"need 0 < beta_1 <= beta_T < 1, got beta_1={beta_1}, beta_T={beta_T}")
    T = int(T)
    if T == 1:
        betas = np.array([beta_1], dtype=np.float64)
    elif kind == "linear":
        betas = np.linspace(beta_1, beta_T, T)
    elif kind == "quadratic":
        betas = np.linspace(math.sqrt(beta_1), math.sqrt(beta_T), T) ** 2
    else:
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-12, 0.999)
    if kind != "cosine":
        # pin the endpoints exactly; linspace can be off by an ulp after squaring
        betas[0], betas[-1] = beta_1, beta_T if T > 1 else beta_1
    sched = TrainingSchedule.from_betas(betas, kind=kind)
    return TrainingSchedule(
        kind=kind, beta_1=float(beta_1), beta_T=float(beta_T), T=T,
        betas=sched.betas, alphas=sched.alphas, alpha_bars=sched.alpha_bars,
    )


@dataclass(frozen=True)
class AlignedSchedule:
    xis: np.ndarray = field(repr=False)
    phis: np.ndarray = field(repr=False)
    phi_bars: np.ndarray = field(repr=False)
    xi_tildes: np.ndarray = field(repr=False)
    t_aligned: np.ndarray
    T_acc: int

    def to_dict(self) -> dict:
        return {"xis": [float(x) for x in self.xis]}


def align_levels(levels, training: TrainingSchedule) -> np.ndarray:
    """Fractional training step at which each noise level sits.

    For each level finds t with sqrt(abar[t+1]) <= sqrt(level) <= sqrt(abar[t])
    and returns t + (sqrt(abar[t]) - sqrt(level)) / (sqrt(abar[t]) - sqrt(abar[t+1])).
    """
    sab = np.sqrt(training.alpha_bars)
    levels = np.atleast_1d(np.asarray(levels, dtype=np.float64))
    out = np.empty_like(levels)
    for i, lv in enumerate(levels):
        s = math.sqrt(lv)
        if training.T == 1:
            if abs(s - sab[0]) > _BRACKET_SLACK:
                raise ScheduleError(f"level {lv} cannot be aligned to a single-step schedule")
            out[i] = 0.0
            continue
        if s > sab[0] + _BRACKET_SLACK or s < sab[-1] - _BRACKET_SLACK:
            raise ScheduleError(
                f"phi_bar={lv:.6g} lies outside the training range "
                f"[{training.alpha_bars[-1]:.6g}, {training.alpha_bars[0]:.6g}]"
            )
        s = min(max(s, sab[-1]), sab[0])
        # sab is strictly decreasing; t is the last index with sab[t] >= s
        t = int(np.searchsorted(-sab, -s, side="right")) - 1
        t = min(max(t, 0), training.T - 2)
        out[i] = t + (sab[t] - s) / (sab[t] - sab[t + 1])
    return out


def build_aligned_schedule(xis: Sequence[float], training: TrainingSchedule) -> AlignedSchedule:
    xis = np.asarray(xis, dtype=np.float64)
    if xis.ndim != 1 or xis.size == 0:
        raise ScheduleError("xis must be a non-empty 1-d sequence")
    if np.any(xis <= 0) or np.any(xis >= 1):
        raise ScheduleError("every xi must lie in (0, 1)")
    if xis.size >= training.T:
        raise ScheduleError(f"T_acc={xis.size} must be smaller than T={training.T}")
    phis = 1.0 - xis
    phi_bars = np.cumprod(phis)
    prev = np.concatenate([[1.0], phi_bars[:-1]])
    xi_tildes = (1.0 - prev) / (1.0 - phi_bars) * xis
    return AlignedSchedule(
        xis=_frozen(xis),
        phis=_frozen(phis),
        phi_bars=_frozen(phi_bars),
        xi_tildes=_frozen(xi_tildes),
        t_aligned=_frozen(align_levels(phi_bars, training)),
        T_acc=int(xis.size),
    )


def sigma_uniform_levels(abar_min: float, steps: int) -> np.ndarray:
    """``steps + 1`` noise levels from ``abar_min`` to 1, uniform in sqrt((1-abar)/abar)."""
    smax = math.sqrt((1.0 - abar_min) / abar_min)
    sig = np.linspace(smax, 0.0, steps + 1)
    return 1.0 / (1.0 + sig * sig)


# -- JSON ------------------------------------------------------------------

def schedule_to_json(training: TrainingSchedule, aligned: AlignedSchedule | None = None) -> str:
    doc = training.to_dict()
    doc["xis"] = None if aligned is None else aligned.to_dict()["xis"]
    return json.dumps(doc, indent=2)


def schedule_from_dict(doc: dict) -> tuple[TrainingSchedule, AlignedSchedule | None]:
    unknown = set(doc) - {"kind", "beta_1", "beta_T", "T", "xis"}
    if unknown:
        raise ScheduleError(f"unknown schedule keys: {sorted(unknown)}")
    training = build_training_schedule(doc["kind"], float(doc["beta_1"]), float(doc["beta_T"]), int(doc["T"]))
    xis = doc.get("xis")
    aligned = build_aligned_schedule(xis, training) if xis else None
    return training, aligned


def schedule_from_json(text: str) -> tuple[TrainingSchedule, AlignedSchedule | None]:
    return schedule_from_dict(json.loads(text))


def load_schedule(path) -> tuple[TrainingSchedule, AlignedSchedule | None]:
    return schedule_from_json(Path(path).read_text())


SIX_STEP_XIS = (0.0001, 0.001, 0.2, 0.3, 0.5, 0.9)


def default_training_schedule() -> TrainingSchedule:
    return build_training_schedule("quadratic", 1e-4, 0.2, 50)
