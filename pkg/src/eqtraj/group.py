"""Regular representation of SO(2) on a grid of angular bins.

A regular field is an array whose last axis has length ``n_theta``; bin ``i``
sits at angle ``2*pi*i/n_theta``.  Rotating by a grid angle acts as a cyclic
shift, and ``lift``/``project`` convert between plane vectors and fields.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class AngularGrid:
    n_theta: int = 16

    def __post_init__(self):
        if self.n_theta < 4:
            raise ValueError(f"n_theta must be at least 4, got {self.n_theta}")

    @cached_property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta

    @cached_property
    def directions(self) -> np.ndarray:
        """Unit vectors of the bins, shape ``(n_theta, 2)``."""
        return np.stack([np.cos(self.angles), np.sin(self.angles)], axis=-1)

    @property
    def bin_width(self) -> float:
        return 2.0 * np.pi / self.n_theta

    def nearest_bin(self, angle):
        """Index of the bin closest to ``angle`` (radians)."""
        return np.rint(np.asarray(angle) / self.bin_width).astype(np.int64) % self.n_theta


def cyclic_shift(f, s: int) -> np.ndarray:
    """Output bin ``i`` holds input bin ``(i - s) mod n``, channel by channel."""
    return np.roll(np.asarray(f, dtype=float), int(s), axis=-1)


def lift(v, grid: AngularGrid) -> np.ndarray:
    """Inner products of ``v`` with every bin direction."""
    return np.asarray(v, dtype=float) @ grid.directions.T


def project(f, grid: AngularGrid) -> np.ndarray:
    """Left inverse of :func:`lift`: ``(2/n) * sum_i f_i * (cos t_i, sin t_i)``."""
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != grid.n_theta:
        raise ValueError(f"field has {f.shape[-1]} bins, grid has {grid.n_theta}")
    return (2.0 / grid.n_theta) * (f @ grid.directions)
