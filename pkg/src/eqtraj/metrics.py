"""Scoring rules and forecast evaluation metrics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from statistics import NormalDist

import numpy as np

from . import autodiff as ad
from .gaussian import Gaussian2, det2, log_density, mahalanobis_sq, psi
from .geom import chi2_quantile2


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


# ---------------------------------------------------------------- interval and regional scores

def mis(u: float, l: float, alpha: float, samples) -> float:
    """Mean interval score of the interval ``[l, u]`` over ``samples``."""
    _check_alpha(alpha)
    if u < l:
        raise ValueError("upper bound below lower bound")
    y = np.asarray(samples, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("mis needs at least one sample")
    pen = (2.0 / alpha) * (np.maximum(y - u, 0.0) + np.maximum(l - y, 0.0))
    return float(np.mean((u - l) + pen))


def regional_score(mean, cov, z, alpha: float):
    """Closed-form regional score of Gaussian(s) at ``z``, elementwise over batch axes.

    ``pi sqrt(det cov) [c_a + max(0, c' - c_a) / alpha]`` with ``c_a`` the
    2-dof chi-square quantile at ``1 - alpha`` and ``c'`` the Mahalanobis
    distance of ``z``.  Accepts autodiff variables.
    """
    _check_alpha(alpha)
    c_a = chi2_quantile2(1.0 - alpha)
    c = mahalanobis_sq(mean, cov, z)
    excess = ad.where(ad.value(c) > c_a, c - c_a, 0.0)
    return ad.sqrt(det2(cov)) * math.pi * (excess * (1.0 / alpha) + c_a)


def mrs_gaussian(d: Gaussian2, alpha: float, samples) -> float:
    """Mean regional score of one Gaussian over a set of 2-D samples."""
    z = np.asarray(samples, dtype=float).reshape(-1, 2)
    if z.shape[0] == 0:
        raise ValueError("mrs needs at least one sample")
    return float(np.mean(regional_score(d.mean, d.cov, z, alpha)))


@dataclass
class GridDensity:
    """Piecewise-constant density on an axis-aligned box.

    ``density[iy, ix]`` is the density of the cell spanning
    ``x0 + ix*dx .. x0 + (ix+1)*dx`` and likewise in ``y``.  Cells are
    indexed in row-major order, ``iy * n_x + ix``.
    """

    box: tuple[float, float, float, float]
    density: np.ndarray

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=float)
        x0, y0, x1, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise ValueError("box must have positive extent")
        if self.density.ndim != 2 or np.any(self.density < 0) or not np.all(np.isfinite(self.density)):
            raise ValueError("density must be a finite nonnegative 2-D array")
        mass = float(self.density.sum() * self.cell_area)
        if abs(mass - 1.0) > 1e-3:
            raise ValueError(f"density integrates to {mass:.6f}, not 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.density.shape

    @property
    def cell_size(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.box
        ny, nx = self.density.shape
        return (x1 - x0) / nx, (y1 - y0) / ny

    @property
    def cell_area(self) -> float:
        dx, dy = self.cell_size
        return dx * dy

    def cell_index(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(-1, 2)
        x0, y0, x1, y1 = self.box
        outside = (z[:, 0] < x0) | (z[:, 0] > x1) | (z[:, 1] < y0) | (z[:, 1] > y1)
        if np.any(outside):
            raise ValueError(f"sample {z[np.argmax(outside)].tolist()} lies outside the grid box")
        ny, nx = self.density.shape
        dx, dy = self.cell_size
        ix = np.minimum(((z[:, 0] - x0) / dx).astype(np.int64), nx - 1)
        iy = np.minimum(((z[:, 1] - y0) / dy).astype(np.int64), ny - 1)
        return iy * nx + ix

    @classmethod
    def from_gaussian(cls, d: Gaussian2, box, n: int | tuple[int, int] = 400) -> "GridDensity":
        """Rasterise a Gaussian at cell centres and renormalise on the box."""
        nx, ny = (n, n) if np.isscalar(n) else n
        x0, y0, x1, y1 = box
        xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
        ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
        pts = np.stack(np.meshgrid(xs, ys), axis=-1)
        dens = np.exp(log_density(d.mean, d.cov, pts))
        area = (x1 - x0) * (y1 - y0) / (nx * ny)
        return cls(tuple(box), dens / (dens.sum() * area))


def mrs_empirical(grid: GridDensity, alpha: float, samples) -> float:
    """Regional score of a gridded density, averaged over samples."""
    _check_alpha(alpha)
    flat = grid.density.ravel()
    cells = grid.cell_index(samples)
    if cells.size == 0:
        raise ValueError("mrs needs at least one sample")
    # descending density, ties by ascending index (stable sort of the negation)
    order = np.argsort(-flat, kind="stable")
    cum = np.cumsum(flat[order]) * grid.cell_area
    n_in = int(np.searchsorted(cum, (1.0 - alpha) - 1e-12) + 1)
    n_in = min(n_in, flat.size)
    included = np.zeros(flat.size, dtype=bool)
    included[order[:n_in]] = True
    area_in = n_in * grid.cell_area
    # |R(z) \ R(1-alpha)|: cells at least as dense as z's cell, not already included
    level = flat[cells]
    n_rz = flat.size - np.searchsorted(np.sort(flat), level, side="left")
    n_rz_in = n_in - np.searchsorted(np.sort(flat[included]), level, side="left")
    extra = np.where(included[cells], 0, n_rz - n_rz_in)
    return float(np.mean(area_in + extra * grid.cell_area / alpha))


# ---------------------------------------------------------------- forecast metrics

def coverage(means, covs, truth, alpha: float, step: int) -> float:
    """Fraction of forecasts whose truth at ``step`` (0-based) lies in the
    ``1 - alpha`` ellipse.  Arrays have the step axis third from the end for
    means, ``(..., k, 2)``."""
    _check_alpha(alpha)
    means, covs, truth = (np.asarray(x, dtype=float) for x in (means, covs, truth))
    k = means.shape[-2]
    if not 0 <= step < k:
        raise ValueError(f"step {step} outside horizon {k}")
    c = mahalanobis_sq(means[..., step, :], covs[..., step, :, :], truth[..., step, :])
    return float(np.mean(c <= chi2_quantile2(1.0 - alpha)))


def displacement_metrics(pred, truth) -> tuple[float, float]:
    """ADE and FDE for point trajectories ``(..., k, 2)``; with a sample axis
    ``(K, ..., k, 2)`` use :func:`min_displacement_metrics`."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    err = np.linalg.norm(pred - truth, axis=-1)
    return float(err.mean()), float(err[..., -1].mean())


def min_displacement_metrics(samples, truth) -> tuple[float, float]:
    """minADE_K and minFDE_K; ``samples`` is ``(K, ..., k, 2)``.  The minimum
    is taken per trajectory and independently for the two metrics."""
    samples, truth = np.asarray(samples, dtype=float), np.asarray(truth, dtype=float)
    if samples.shape[1:] != truth.shape:
        raise ValueError(f"shape mismatch {samples.shape[1:]} vs {truth.shape}")
    err = np.linalg.norm(samples - truth, axis=-1)
    return float(err.mean(axis=-1).min(axis=0).mean()), float(err[..., -1].min(axis=0).mean())


def sample_trajectories(means, covs, n_samples: int = 6, seed: int = 0) -> np.ndarray:
    """Draw ``n_samples`` trajectories per forecast using the factor psi(cov).

    One standard-normal draw per trajectory is shared across steps, so a
    sample is a coherent path rather than independent per-step noise.
    """
    means, covs = np.asarray(means, dtype=float), np.asarray(covs, dtype=float)
    rng = np.random.default_rng(seed)
    lead = means.shape[:-2]
    factors = np.empty(covs.shape)
    for idx in np.ndindex(covs.shape[:-2]):
        factors[idx] = psi(covs[idx])
    z = rng.standard_normal((n_samples,) + lead + (1, 2))
    return means + np.einsum("...xy,...y->...x", factors, z)


def report_steps(horizon: int) -> tuple[int, int, int]:
    """1-based steps at a third, two thirds and the full horizon."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    return (max(1, math.ceil(horizon / 3)), max(1, math.ceil(2 * horizon / 3)), horizon)


COLUMNS = ("ade", "fde", "min_ade_k", "min_fde_k", "nll", "mis", "mrs", "cov_s1", "cov_s2", "cov_s3")


@dataclass
class MetricReport:
    ade: float
    fde: float
    min_ade_k: float
    min_fde_k: float
    nll: float
    mis: float
    mrs: float
    cov_s1: float
    cov_s2: float
    cov_s3: float

    def __post_init__(self):
        for name in COLUMNS:
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"metric '{name}' is not finite")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict())

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([repr(getattr(self, c)) for c in COLUMNS])
        return buf.getvalue()

    @staticmethod
    def csv_header() -> str:
        return ",".join(COLUMNS) + "\n"


def evaluate(means, covs, truth, alpha: float = 0.1, n_samples: int = 6, seed: int = 0) -> MetricReport:
    """Full metric report for Gaussian forecasts ``(..., k, 2)`` against truth.

    MIS is the average over both coordinates of the marginal central
    ``1 - alpha`` interval score.
    """
    _check_alpha(alpha)
    means, covs, truth = (np.asarray(x, dtype=float) for x in (means, covs, truth))
    k = means.shape[-2]
    ade, fde = displacement_metrics(means, truth)
    samples = sample_trajectories(means, covs, n_samples, seed)
    min_ade, min_fde = min_displacement_metrics(samples, truth)
    nll = float(-np.mean(log_density(means, covs, truth)))
    zq = NormalDist().inv_cdf(1.0 - alpha / 2.0)
    sd = np.sqrt(np.stack([covs[..., 0, 0], covs[..., 1, 1]], axis=-1))
    lo, hi = means - zq * sd, means + zq * sd
    interval = (hi - lo) + (2.0 / alpha) * (np.maximum(truth - hi, 0) + np.maximum(lo - truth, 0))
    mrs = float(np.mean(regional_score(means, covs, truth, alpha)))
    s1, s2, s3 = report_steps(k)
    cov = [coverage(means, covs, truth, alpha, s - 1) for s in (s1, s2, s3)]
    return MetricReport(ade, fde, min_ade, min_fde, nll, float(interval.mean()), mrs, *cov)
