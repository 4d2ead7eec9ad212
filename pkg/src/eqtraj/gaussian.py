"""Bivariate normal distributions and their behaviour under rotation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geom import Rotation, eig_sym2, is_symmetric

LOG_2PI = math.log(2.0 * math.pi)
# min eigenvalue / max eigenvalue below this counts as singular
SPD_RATIO = 1e-12


def check_spd(cov) -> None:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2) or not np.all(np.isfinite(cov)):
        raise ValueError("covariance must be a finite 2x2 matrix")
    if not is_symmetric(cov):
        raise ValueError("covariance is not symmetric")
    _, lam1, lam2 = eig_sym2(cov)
    if lam1 <= 0 or lam2 <= SPD_RATIO * lam1:
        raise ValueError(f"covariance is not positive definite (eigenvalues {lam1:g}, {lam2:g})")


@dataclass(frozen=True)
class Gaussian2:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean must be finite")
        check_spd(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


# ---------------------------------------------------------------- batched forms
# These accept numpy arrays or autodiff Vars with shapes (..., 2) and (..., 2, 2).

def det2(cov):
    return cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]


def mahalanobis_sq(mean, cov, x):
    """(x - mean)^T cov^{-1} (x - mean) via the explicit 2x2 inverse."""
    d = x - mean
    dx, dy = d[..., 0], d[..., 1]
    num = dx * dx * cov[..., 1, 1] - dx * dy * (cov[..., 0, 1] + cov[..., 1, 0]) + dy * dy * cov[..., 0, 0]
    return num / det2(cov)


def log_density(mean, cov, x):
    return -LOG_2PI - 0.5 * ad.log(det2(cov)) - 0.5 * mahalanobis_sq(mean, cov, x)


# ---------------------------------------------------------------- single-distribution API

def log_pdf(d: Gaussian2, v) -> float:
    """Log-density with the standard ``1 / (2 pi sqrt(det cov))`` normalisation."""
    _, lam1, lam2 = eig_sym2(d.cov)
    if lam2 <= 0 or lam1 / lam2 > 1e12:
        raise ValueError("covariance is numerically singular")
    return float(log_density(d.mean, d.cov, np.asarray(v, dtype=float)))


def act(g: Rotation, d: Gaussian2) -> Gaussian2:
    r = g.matrix
    cov = r @ d.cov @ r.T
    return Gaussian2(r @ d.mean, 0.5 * (cov + cov.T))


def phi(m) -> np.ndarray:
    """M -> M M^T, from invertible factors to SPD matrices."""
    m = np.asarray(m, dtype=float)
    if abs(np.linalg.det(m)) <= 1e-12:
        raise ValueError("phi needs an invertible matrix")
    return m @ m.T


def psi(cov) -> np.ndarray:
    """One-sided inverse of :func:`phi`: ``Q diag(sqrt(lam))`` from the eigendecomposition."""
    cov = np.asarray(cov, dtype=float)
    check_spd(cov)
    q, lam1, lam2 = eig_sym2(cov)
    return q * np.sqrt([lam1, lam2])


def region_area(d: Gaussian2, level_c: float) -> float:
    """Area of the ellipse ``{z : mahalanobis^2 <= level_c}``."""
    if level_c < 0:
        raise ValueError("level must be nonnegative")
    return math.pi * level_c * math.sqrt(np.linalg.det(d.cov))


def mahalanobis2(d: Gaussian2, z) -> float:
    return float(mahalanobis_sq(d.mean, d.cov, np.asarray(z, dtype=float)))
