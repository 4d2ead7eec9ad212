"""Inductive conformal prediction regions for multi-step 2-D forecasts.

A point forecaster is any callable ``f(history, env) -> means`` mapping
``(S, A, t, 2)`` histories and ``(S, E, 2)`` environments to ``(S, A, k, 2)``
predicted positions.  Calibration uses a single focal agent per scene so
that calibration scores are exchangeable across scenes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

Forecaster = Callable[[np.ndarray, np.ndarray], np.ndarray]
CORRECTIONS = ("bonferroni", "none")


class InfeasibleQuantile(ValueError):
    """Too few calibration scenes for the requested level."""

    def __init__(self, n_cal: int, required: int, alpha_step: float):
        super().__init__(f"{n_cal} calibration scenes cannot support level {alpha_step:g}: "
                         f"need at least {required}")
        self.n_cal = n_cal
        self.required = required


@dataclass(frozen=True)
class ConformalCalibration:
    alpha: float
    correction: str
    gamma: tuple[float, ...]      # critical radius per step

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if any(g < 0 or math.isnan(g) for g in self.gamma):
            raise ValueError("critical scores must be nonnegative")
        if self.correction not in CORRECTIONS:
            raise ValueError(f"correction must be one of {CORRECTIONS}")

    @property
    def horizon(self) -> int:
        return len(self.gamma)

    @property
    def alpha_step(self) -> float:
        return step_level(self.alpha, self.horizon, self.correction)

    def to_json(self) -> str:
        return json.dumps({"alpha": self.alpha, "correction": self.correction, "gamma": list(self.gamma)})

    @classmethod
    def from_json(cls, text: str) -> "ConformalCalibration":
        doc = json.loads(text)
        return cls(float(doc["alpha"]), doc["correction"], tuple(doc["gamma"]))


@dataclass(frozen=True)
class Disk:
    center: np.ndarray
    radius: float

    @property
    def area(self) -> float:
        return math.pi * self.radius ** 2

    def contains(self, z) -> bool:
        return bool(np.linalg.norm(np.asarray(z, dtype=float) - self.center) <= self.radius)


def step_level(alpha: float, k: int, correction: str = "bonferroni") -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if correction not in CORRECTIONS:
        raise ValueError(f"correction must be one of {CORRECTIONS}")
    return alpha / k if correction == "bonferroni" and k > 0 else alpha


def quantile_rank(n_cal: int, alpha_step: float) -> int:
    """1-based rank ``ceil((l + 1)(1 - alpha_step))`` of the critical score."""
    # guard against products like 9.000000000000002 rounding up a whole rank
    return int(math.ceil((n_cal + 1) * (1.0 - alpha_step) - 1e-9))


def required_calibration_size(alpha_step: float) -> int:
    """Smallest l with ``ceil((l + 1)(1 - alpha_step)) <= l``."""
    l = 1
    while quantile_rank(l, alpha_step) > l:
        l += 1
    return l


def calibrate_scores(scores, alpha: float, correction: str = "bonferroni") -> ConformalCalibration:
    """Critical scores from a ``(l, k)`` array of calibration nonconformity scores."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("need a nonempty (scenes, steps) score array")
    l, k = scores.shape
    a_step = step_level(alpha, k, correction)
    rank = quantile_rank(l, a_step)
    if rank > l:
        raise InfeasibleQuantile(l, required_calibration_size(a_step), a_step)
    gamma = np.sort(scores, axis=0)[rank - 1]
    return ConformalCalibration(alpha, correction, tuple(gamma))


def nonconformity(pred, truth) -> np.ndarray:
    """Euclidean distance between predicted and true positions per step."""
    return np.linalg.norm(np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float), axis=-1)


def focal_scores(forecaster: Forecaster, batch, agent: int = 0) -> np.ndarray:
    pred = np.asarray(forecaster(batch.history, batch.env))
    k = batch.future.shape[-2]
    if pred.shape[-2] != k:
        raise ValueError(f"forecast horizon {pred.shape[-2]} does not match data horizon {k}")
    return nonconformity(pred[:, agent], batch.future[:, agent])


def calibrate(forecaster: Forecaster, batch, alpha: float = 0.1, correction: str = "bonferroni",
              agent: int = 0) -> ConformalCalibration:
    """Calibrate per-step radii on a held-out batch (see :class:`eqtraj.scenes.SceneBatch`)."""
    return calibrate_scores(focal_scores(forecaster, batch, agent), alpha, correction)


def predict_regions(cal: ConformalCalibration, forecast) -> list[Disk]:
    """Disks of radius gamma_j around each predicted position ``(k, 2)``."""
    forecast = np.asarray(forecast, dtype=float)
    if forecast.shape != (cal.horizon, 2):
        raise ValueError(f"forecast must have shape ({cal.horizon}, 2), got {forecast.shape}")
    return [Disk(forecast[j].copy(), g) for j, g in enumerate(cal.gamma)]


def covered(cal: ConformalCalibration, pred, truth) -> np.ndarray:
    """Boolean ``(..., k)`` membership of truths in the calibrated disks."""
    return nonconformity(pred, truth) <= np.asarray(cal.gamma)


def joint_coverage(cal: ConformalCalibration, forecaster: Forecaster, batch, agent: int = 0) -> float:
    """Fraction of scenes whose focal truth lies in every step's disk."""
    inside = focal_scores(forecaster, batch, agent) <= np.asarray(cal.gamma)
    return float(np.mean(np.all(inside, axis=-1)))


def marginal_coverage(cal: ConformalCalibration, forecaster: Forecaster, batch, agent: int = 0) -> np.ndarray:
    inside = focal_scores(forecaster, batch, agent) <= np.asarray(cal.gamma)
    return inside.mean(axis=0)
