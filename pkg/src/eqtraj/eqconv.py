"""Rotation-equivariant continuous convolution over point clouds, plus the
equivariant matrix output layer and its exponential head.

Features live in the regular representation: an array ``(..., C, n_theta)``
per point.  A layer sums over neighbours ``j`` of point ``i``

    g_i = sum_j a(|x_j - x_i|) K(x_j - x_i) f_j

with window ``a(r) = (1 - (r/R)^2)^2`` on ``r < R``.  The kernel has two parts,
both looked up by the radial bin of the displacement:

* an offset kernel, a circular cross-correlation over bins that mixes
  channels (``offset[r, o, c_in, c_out]`` couples output bin ``b`` with input
  bin ``b - o``);
* a direction kernel that reweights each bin by its angle relative to the
  neighbour, ``direction[r, (b - s_ij) mod n, c_in]`` where ``s_ij`` is the
  nearest bin of the polar angle of ``x_j - x_i``, followed by a channel mix.

Rotating the positions by ``2*pi*s/n`` and shifting input bins by ``s`` shifts
output bins by ``s`` exactly.  The self term (``j = i``) uses radius 0 and
only the offset kernel, since it has no direction.

The non-equivariant ablation replaces the offset kernel by a dense bin-to-bin
matrix and indexes the direction kernel by absolute angle bin.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geom import expm2, rot_matrix
from .group import AngularGrid


@dataclass
class KernelParams:
    offset: np.ndarray        # (n_r, n, cin, cout); ablation: (n_r, n, n, cin, cout)
    direction: np.ndarray     # (n_r, n, cin);       ablation: (n_r, n, n, cin)
    mix: np.ndarray           # (cin, cout)
    radius: float
    equivariant: bool = True

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("cutoff radius must be positive")
        for name in ("offset", "direction", "mix"):
            if not np.all(np.isfinite(ad.value(getattr(self, name)))):
                raise ValueError(f"kernel weights '{name}' are not finite")

    @property
    def n_r(self) -> int:
        return ad.value(self.offset).shape[0]

    @property
    def n_theta(self) -> int:
        return ad.value(self.offset).shape[1]

    @property
    def channels(self) -> tuple[int, int]:
        c_in, c_out = ad.value(self.mix).shape
        return c_in, c_out


@dataclass
class MatrixHeadParams:
    """One trainable 2x2 matrix ``[[a, b], [c, d]]`` per output channel."""

    m: np.ndarray = field(default_factory=lambda: np.eye(2))


@dataclass
class PointCloud:
    positions: np.ndarray     # (N, 2)
    features: np.ndarray      # (N, C, n)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 3 or self.features.shape[0] != self.positions.shape[0]:
            raise ValueError("features must have shape (n_points, channels, n_theta)")


@dataclass
class PairGeometry:
    """Non-differentiable bin lookups for every ordered pair of points."""

    radial_onehot: np.ndarray   # (..., N, N, n_r)
    radial_bin: np.ndarray      # (..., N, N)
    angle_bin: np.ndarray       # (..., N, N)
    off_diagonal: np.ndarray    # (N, N)


def window(r2, radius: float):
    """(1 - r^2/R^2)^2 inside the cutoff, zero outside; takes squared distances."""
    inside = ad.value(r2) < radius * radius
    w = (1.0 - r2 * (1.0 / (radius * radius))) ** 2
    return ad.where(inside, w, 0.0)


def pair_geometry(positions, radius: float, n_r: int, grid: AngularGrid) -> PairGeometry:
    pos = np.asarray(ad.value(positions), dtype=float)
    d = pos[..., None, :, :] - pos[..., :, None, :]        # d[i, j] = x_j - x_i
    r = np.hypot(d[..., 0], d[..., 1])
    rbin = np.clip(np.floor(r * n_r / radius).astype(np.int64), 0, n_r - 1)
    sbin = grid.nearest_bin(np.arctan2(d[..., 1], d[..., 0]))
    n = pos.shape[-2]
    eye = np.eye(n, dtype=bool)
    rbin = np.where(eye, 0, rbin)
    sbin = np.where(eye, 0, sbin)
    onehot = (rbin[..., None] == np.arange(n_r)).astype(float)
    return PairGeometry(onehot, rbin, sbin, (~eye).astype(float))


def squared_distances(positions):
    d = positions[..., None, :, :] - positions[..., :, None, :]
    return ad.sum(d * d, axis=-1)


def conv(positions, features, kernel: KernelParams, geometry: PairGeometry | None = None):
    """Linear continuous convolution; works on numpy arrays or autodiff Vars.

    ``positions`` is ``(..., N, 2)`` and ``features`` ``(..., N, C_in, n)``;
    returns features ``(..., N, C_out, n)``.
    """
    n = ad.value(features).shape[-1]
    if n != kernel.n_theta:
        raise ValueError(f"features have {n} angular bins, kernel expects {kernel.n_theta}")
    c_in, _ = kernel.channels
    if ad.value(features).shape[-2] != c_in:
        raise ValueError("feature channels do not match the kernel")
    grid = AngularGrid(n)
    if geometry is None:
        geometry = pair_geometry(positions, kernel.radius, kernel.n_r, grid)
    a = window(squared_distances(positions), kernel.radius)

    weighted = ad.einsum("...ij,...ijr->...ijr", a, geometry.radial_onehot)
    agg = ad.einsum("...ijr,...jcb->...ircb", weighted, features)
    b = np.arange(n)
    if kernel.equivariant:
        offsets = (b[:, None] - b[None, :]) % n        # [out bin, in bin]
        dense = kernel.offset[:, offsets]               # (n_r, n, n, cin, cout)
    else:
        dense = kernel.offset
    out = ad.einsum("...ircu,rbuco->...iob", agg, dense)

    rb = geometry.radial_bin[..., None]
    if kernel.equivariant:
        rel = (b - geometry.angle_bin[..., None]) % n
        dir_w = kernel.direction[rb, rel]               # (..., N, N, n, cin)
    else:
        dir_w = kernel.direction[rb, geometry.angle_bin[..., None], b]
    a_off = a * geometry.off_diagonal
    directed = ad.einsum("...ij,...ijbc,...jcb->...icb", a_off, dir_w, features)
    return out + ad.einsum("...icb,co->...iob", directed, kernel.mix)


def cts_conv(cloud: PointCloud, kernel: KernelParams) -> PointCloud:
    """Apply one convolution layer to a point cloud; positions pass through."""
    feats = conv(cloud.positions, cloud.features, kernel)
    return PointCloud(cloud.positions.copy(), feats)


def conjugation_basis(m, grid: AngularGrid):
    """rho(theta_i) M rho(-theta_i) for every bin, shape (n, 2, 2)."""
    r = rot_matrix(grid.angles)
    return ad.einsum("iab,bc,idc->iad", r, m, r)


def matrix_head(f, p: MatrixHeadParams):
    """Discretised equivariant matrix layer ``sum_i f_i rho(t_i) M rho(-t_i)``.

    ``f`` is a single-channel field ``(..., n)``.
    """
    grid = AngularGrid(ad.value(f).shape[-1])
    return ad.einsum("...i,ixy->...xy", f, conjugation_basis(p.m, grid))


def exp_head(f, p: MatrixHeadParams):
    """Invertible equivariant output: the matrix exponential of :func:`matrix_head`."""
    return expm2(matrix_head(f, p))
