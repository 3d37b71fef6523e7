"""Finite-difference spatial operators on structured grids.

Fields live on an n_y x n_x grid flattened row-major (point = y * n_x + x).
The 5-point Laplacian propagates means through the usual stencil and
variances through the squared coefficients:

    var_lap = (var_E + var_W + 4 var_C) / dx^4 + (var_N + var_S + 4 var_C) / dy^4

Output rows at boundary points are zero; the Neumann boundary is applied
separately after each time step as a first-order mirror copy of the means
(corners resolve via the x-edge copy followed by the y-edge copy) with the
boundary variances set to zero.

Every operator is exposed both as a direct numpy computation on a
``MomentField`` and as dense matrices (``LinearStencil`` pairs) so that tape
rollouts can apply the identical coefficients with matmul nodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .moments import GridSpec, MomentField, MomentError


@dataclass(frozen=True)
class LinearStencil:
    """Dense matrix form of a linear operator over grid points."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise MomentError(f"stencil matrix must be square, got {m.shape}")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)


def _require_interior(grid: GridSpec):
    if grid.n_x < 3 or grid.n_y < 3:
        raise MomentError(f"laplacian needs at least a 3x3 grid, got {grid.n_x}x{grid.n_y}")


@lru_cache(maxsize=32)
def _laplacian_matrices(n_x: int, n_y: int, dx: float, dy: float):
    P = n_x * n_y
    K = np.zeros((P, P))
    Kv = np.zeros((P, P))
    cx = 1.0 / (dx * dx)
    cy = 1.0 / (dy * dy)
    for j in range(1, n_y - 1):
        for i in range(1, n_x - 1):
            p = j * n_x + i
            K[p, p] = -2.0 * cx - 2.0 * cy
            K[p, p - 1] = cx
            K[p, p + 1] = cx
            K[p, p - n_x] = cy
            K[p, p + n_x] = cy
            # x and y second differences count as independent contributions,
            # so the center variance weight is 4 cx^2 + 4 cy^2, not (2cx+2cy)^2.
            Kv[p, p] = 4.0 * (cx * cx + cy * cy)
            Kv[p, p - 1] = cx * cx
            Kv[p, p + 1] = cx * cx
            Kv[p, p - n_x] = cy * cy
            Kv[p, p + n_x] = cy * cy
    return K, Kv


def laplacian_stencils(grid: GridSpec):
    """(mean, variance) LinearStencils of the 5-point Laplacian.

    Boundary rows are zero in both. The variance matrix carries the squared
    coefficients of the two directional second differences summed per point.
    """
    _require_interior(grid)
    K, Kv = _laplacian_matrices(grid.n_x, grid.n_y, grid.dx, grid.dy)
    return LinearStencil(K), LinearStencil(Kv)


def laplacian(fld: MomentField, grid: GridSpec) -> MomentField:
    """Laplacian moments of a field: stencil means, squared-stencil variances."""
    _require_interior(grid)
    if fld.n_points != grid.n_points:
        raise MomentError(f"field has {fld.n_points} points but grid {grid.n_points}")
    n_x, n_y = grid.n_x, grid.n_y
    cx, cy = 1.0 / grid.dx ** 2, 1.0 / grid.dy ** 2
    m = fld.mean.reshape(fld.n_v, n_y, n_x)
    v = fld.var.reshape(fld.n_v, n_y, n_x)
    out_m = np.zeros_like(m)
    out_v = np.zeros_like(v)
    c = np.s_[:, 1:-1, 1:-1]
    east, west = np.s_[:, 1:-1, 2:], np.s_[:, 1:-1, :-2]
    north, south = np.s_[:, 2:, 1:-1], np.s_[:, :-2, 1:-1]
    out_m[c] = (m[east] + m[west] - 2.0 * m[c]) * cx + (m[north] + m[south] - 2.0 * m[c]) * cy
    out_v[c] = (v[east] + v[west] + 4.0 * v[c]) * cx * cx + (v[north] + v[south] + 4.0 * v[c]) * cy * cy
    return MomentField(mean=out_m.reshape(fld.n_v, -1), var=out_v.reshape(fld.n_v, -1))


@lru_cache(maxsize=32)
def _neumann_matrices(n_x: int, n_y: int):
    """Mean copy matrix (x edges then y edges) and the variance zero mask."""
    P = n_x * n_y

    def pid(j, i):
        return j * n_x + i

    copy_x = np.eye(P)
    if n_x >= 2:
        for j in range(n_y):
            copy_x[pid(j, 0), :] = 0.0
            copy_x[pid(j, 0), pid(j, 1)] = 1.0
            copy_x[pid(j, n_x - 1), :] = 0.0
            copy_x[pid(j, n_x - 1), pid(j, n_x - 2)] = 1.0
    copy_y = np.eye(P)
    if n_y >= 2:
        for i in range(n_x):
            copy_y[pid(0, i), :] = 0.0
            copy_y[pid(0, i), pid(1, i)] = 1.0
            copy_y[pid(n_y - 1, i), :] = 0.0
            copy_y[pid(n_y - 1, i), pid(n_y - 2, i)] = 1.0
    mean_mat = copy_y @ copy_x

    var_mat = np.zeros((P, P))
    for j in range(1, n_y - 1):
        for i in range(1, n_x - 1):
            p = pid(j, i)
            var_mat[p, p] = 1.0
    return mean_mat, var_mat


def neumann_stencils(grid: GridSpec):
    """(mean, variance) LinearStencils realizing the Neumann boundary."""
    _require_interior(grid)
    mean_mat, var_mat = _neumann_matrices(grid.n_x, grid.n_y)
    return LinearStencil(mean_mat), LinearStencil(var_mat)


def apply_neumann(fld: MomentField, grid: GridSpec) -> MomentField:
    """Mirror-copy boundary means from the adjacent interior, zero boundary variances.

    The x-direction edges are copied first, then the y-direction edges, so a
    corner ends up holding its diagonal interior neighbor. Applying the
    operator twice changes nothing.
    """
    _require_interior(grid)
    if fld.n_points != grid.n_points:
        raise MomentError(f"field has {fld.n_points} points but grid {grid.n_points}")
    n_x, n_y = grid.n_x, grid.n_y
    m = fld.mean.reshape(fld.n_v, n_y, n_x).copy()
    v = fld.var.reshape(fld.n_v, n_y, n_x).copy()
    m[:, :, 0] = m[:, :, 1]
    m[:, :, -1] = m[:, :, -2]
    m[:, 0, :] = m[:, 1, :]
    m[:, -1, :] = m[:, -2, :]
    v[:, :, 0] = 0.0
    v[:, :, -1] = 0.0
    v[:, 0, :] = 0.0
    v[:, -1, :] = 0.0
    return MomentField(mean=m.reshape(fld.n_v, -1), var=v.reshape(fld.n_v, -1))


def boundary_mask(grid: GridSpec) -> np.ndarray:
    """Boolean (n_points,) mask of boundary points."""
    mask = np.zeros((grid.n_y, grid.n_x), dtype=bool)
    mask[0, :] = True
    mask[-1, :] = True
    mask[:, 0] = True
    mask[:, -1] = True
    return mask.reshape(-1)
