"""Diagonal-Gaussian moment fields and the exact linear propagation rules.

State estimates are carried as independent per-point Gaussians: a mean array
and a variance array per state variable. Linear and affine maps propagate
these moments exactly; cross-covariances are never tracked, so any linear
combination treats its inputs as independent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MomentError(Exception):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Geometry and time discretization shared by fields and rollouts.

    ODE systems use a degenerate 1x1 grid. ``n_t`` counts stored frames, so a
    trajectory covering ``n_t`` frames spans ``n_t - 1`` steps.
    """

    n_x: int
    n_y: int
    n_v: int
    dx: float
    dy: float
    dt: float
    n_t: int

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1 or self.n_v < 1:
            raise MomentError(f"grid extents must be positive, got {self.n_x}x{self.n_y}x{self.n_v}")
        if self.dx <= 0 or self.dy <= 0 or self.dt <= 0:
            raise MomentError(f"grid spacings must be positive, got dx={self.dx} dy={self.dy} dt={self.dt}")
        if self.n_t < 0:
            raise MomentError(f"n_t must be >= 0, got {self.n_t}")

    @property
    def n_points(self) -> int:
        return self.n_x * self.n_y

    @classmethod
    def unit_square(cls, n: int, n_v: int, dt: float, n_t: int) -> "GridSpec":
        """n x n grid on the unit square, dx = dy = 1/(n-1)."""
        if n < 2:
            raise MomentError(f"unit-square grid needs n >= 2, got {n}")
        h = 1.0 / (n - 1)
        return cls(n_x=n, n_y=n, n_v=n_v, dx=h, dy=h, dt=dt, n_t=n_t)

    @classmethod
    def ode(cls, n_v: int, dt: float, n_t: int) -> "GridSpec":
        return cls(n_x=1, n_y=1, n_v=n_v, dx=1.0, dy=1.0, dt=dt, n_t=n_t)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class MomentField:
    """Mean and variance over grid points, one row per state variable."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _freeze(self.mean))
        object.__setattr__(self, "var", _freeze(self.var))
        if self.mean.shape != self.var.shape:
            raise MomentError(f"mean/var shapes differ: {self.mean.shape} vs {self.var.shape}")
        if self.mean.ndim != 2:
            raise MomentError(f"moment arrays must be (n_v, n_points), got {self.mean.shape}")
        if np.any(self.var < 0):
            raise MomentError("negative variance in MomentField")

    @property
    def n_v(self) -> int:
        return self.mean.shape[0]

    @property
    def n_points(self) -> int:
        return self.mean.shape[1]


def _as_matrix(K) -> np.ndarray:
    m = getattr(K, "matrix", K)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise MomentError(f"linear operator must be a square matrix, got shape {m.shape}")
    return m


def affine_propagate(fld: MomentField, K, b=None) -> MomentField:
    """Push a moment field through the affine map x -> K x + b.

    Means transform exactly; variances pick up the squared coefficients:
    ``var_out_i = sum_j K_ij^2 var_j``. The offset does not touch variances.
    A zero-variance field therefore stays zero-variance.
    """
    m = _as_matrix(K)
    if m.shape[0] != fld.n_points:
        raise MomentError(f"operator is {m.shape} but field has {fld.n_points} points")
    mean = fld.mean @ m.T
    if b is not None:
        mean = mean + np.asarray(b, dtype=np.float64)
    var = fld.var @ (m * m).T
    return MomentField(mean=mean, var=var)


def combine_linear(fields: Sequence[MomentField], coeffs: Sequence[float]) -> MomentField:
    """Moments of ``sum_i c_i X_i`` with the X_i treated as independent.

    Mean is the weighted sum; variance is ``sum_i c_i^2 var_i``. Combining a
    field with itself under (1, -1) does not cancel the variance, by design:
    the inputs are modeled as independent even when numerically identical.
    """
    if len(fields) == 0 or len(fields) != len(coeffs):
        raise MomentError(f"need matching nonempty fields/coeffs, got {len(fields)}/{len(coeffs)}")
    shape = fields[0].mean.shape
    for f in fields[1:]:
        if f.mean.shape != shape:
            raise MomentError(f"field shapes differ: {f.mean.shape} vs {shape}")
    mean = np.zeros(shape)
    var = np.zeros(shape)
    for f, c in zip(fields, coeffs):
        c = float(c)
        mean = mean + c * f.mean
        var = var + c * c * f.var
    return MomentField(mean=mean, var=var)
