"""Exact 2-D numeric kernel: rotations, symmetric eigendecomposition,
matrix exponential and the 2-dof chi-square quantile.

Vectors are numpy arrays of shape ``(..., 2)`` and matrices ``(..., 2, 2)``;
the scalar-looking functions broadcast over leading axes where that is free.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

TWO_PI = 2.0 * math.pi

# rotation generator, exp(theta * J) = rot(theta)
J = np.array([[0.0, -1.0], [1.0, 0.0]])


def rot_matrix(theta):
    """Rotation matrix rho_1(theta); broadcasts over an array of angles."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


@dataclass(frozen=True)
class Rotation:
    """An element of SO(2), stored by its angle reduced to [0, 2*pi)."""

    angle: float

    def __post_init__(self):
        object.__setattr__(self, "angle", float(self.angle) % TWO_PI)

    @classmethod
    def from_bins(cls, shift: int, n_theta: int) -> "Rotation":
        return cls(TWO_PI * shift / n_theta)

    @property
    def matrix(self) -> np.ndarray:
        return rot_matrix(self.angle)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.angle + other.angle)

    def inverse(self) -> "Rotation":
        return Rotation(-self.angle)


def rot_apply(g: Rotation, v) -> np.ndarray:
    """Rotate vector(s) ``v`` by ``g``."""
    return np.asarray(v, dtype=float) @ g.matrix.T


def conjugate(g: Rotation, m) -> np.ndarray:
    """g m g^T for matrix (or stack of matrices) ``m``."""
    r = g.matrix
    return r @ np.asarray(m, dtype=float) @ r.T


def is_symmetric(s, tol: float = 1e-10) -> bool:
    s = np.asarray(s, dtype=float)
    scale = max(1.0, float(np.max(np.abs(s))))
    return abs(s[0, 1] - s[1, 0]) <= tol * scale


def eig_sym2(s):
    """Eigendecomposition of a symmetric 2x2 matrix.

    Returns ``(q, lam1, lam2)`` with ``lam1 >= lam2`` and ``q.T @ s @ q``
    diagonal.  Each eigenvector is signed so its first nonzero component is
    nonnegative, then the second column is negated if needed so that
    ``det(q) = +1``.  A degenerate spectrum returns ``q = I``.

    Raises
    ------
    ValueError
        If ``s`` is not symmetric within 1e-10.
    """
    s = np.asarray(s, dtype=float)
    if s.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("matrix has non-finite entries")
    if not is_symmetric(s):
        raise ValueError("eig_sym2 requires a symmetric matrix")
    a, d = s[0, 0], s[1, 1]
    b = 0.5 * (s[0, 1] + s[1, 0])
    half_tr = 0.5 * (a + d)
    half_diff = 0.5 * (a - d)
    disc = math.hypot(half_diff, b)
    lam1, lam2 = half_tr + disc, half_tr - disc
    if disc <= 1e-15 * max(abs(a), abs(d), 1e-300):
        return np.eye(2), half_tr, half_tr
    phi = 0.5 * math.atan2(b, half_diff)
    q1 = np.array([math.cos(phi), math.sin(phi)])
    q2 = np.array([-math.sin(phi), math.cos(phi)])
    cols = []
    for q in (q1, q2):
        lead = q[0] if q[0] != 0.0 else q[1]
        cols.append(-q if lead < 0 else q)
    q = np.column_stack(cols)
    if np.linalg.det(q) < 0:
        q[:, 1] = -q[:, 1]
    return q, lam1, lam2


_TAYLOR_TERMS = 12


def expm2(m):
    """Matrix exponential of a 2x2 matrix (or a stack) by scaling and squaring.

    The scaled matrix has infinity norm at most 1/2 and is summed with a
    12-term Taylor polynomial, which keeps the truncation error below 1e-13.
    Accepts autodiff variables; the number of squarings is chosen from the
    values and is not differentiated.
    """
    if not isinstance(m, ad.Var):
        m = np.asarray(m, dtype=float)
    mv = ad.value(m)
    norm = float(np.max(np.sum(np.abs(mv), axis=-1))) if mv.size else 0.0
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    a = m * (1.0 / 2.0**squarings)
    eye = np.broadcast_to(np.eye(2), mv.shape)
    # Horner: I + A(I + A/2(I + A/3(...)))
    acc = eye
    for k in range(_TAYLOR_TERMS, 0, -1):
        acc = eye + ad.matmul2(a, acc) * (1.0 / k) if k < _TAYLOR_TERMS else eye + a * (1.0 / k)
    for _ in range(squarings):
        acc = ad.matmul2(acc, acc)
    return acc


def chi2_quantile2(p: float) -> float:
    """Quantile of the chi-square distribution with two degrees of freedom."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"probability must lie in [0, 1), got {p}")
    return -2.0 * math.log1p(-p)
