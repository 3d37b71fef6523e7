"""Synthetic ground truth: classical solves, noise injection, and masking.

The solvers here work on plain state arrays with no moment machinery, so they
serve as independent references for the hybrid rollouts. Their stage and
accumulation order matches the moment steppers exactly; a zero-variance
moment rollout of the true physics therefore reduces to these trajectories
bit for bit (single-point sigma sums permitting).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .bayes import Dataset
from .moments import GridSpec
from .spatial import boundary_mask


class DatagenError(Exception):
    pass


@dataclass(frozen=True)
class Trajectory:
    """Deterministic solve: frames[k, v, p] is variable v at point p, time k dt."""

    grid: GridSpec
    frames: np.ndarray

    def __post_init__(self):
        frames = np.ascontiguousarray(np.asarray(self.frames, dtype=np.float64))
        g = self.grid
        want = (g.n_t, g.n_v, g.n_points)
        if frames.shape != want:
            raise DatagenError(f"frames must have shape {want}, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DatagenError("non-finite trajectory frame")
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.grid.n_t) * self.grid.dt


# --- classical integrators ---------------------------------------------------

def classical_euler_step(f, y: np.ndarray, t: float, dt: float) -> np.ndarray:
    return y + dt * f(y, t)


def classical_rk4_step(f, y: np.ndarray, t: float, dt: float) -> np.ndarray:
    h = 0.5 * dt
    k1 = f(y, t)
    k2 = f(y + h * k1, t + h)
    k3 = f(y + h * k2, t + h)
    k4 = f(y + dt * k3, t + dt)
    acc = k1 + 2.0 * k2 + 2.0 * k3 + k4
    return y + (dt / 6.0) * acc


_CLASSICAL_STEPS = {"euler": classical_euler_step, "rk4": classical_rk4_step}


# --- systems -----------------------------------------------------------------

def pendulum_rate(y: np.ndarray, t: float = 0.0) -> np.ndarray:
    return np.stack([y[1], -np.sin(y[0])])


def pendulum_energy(states: np.ndarray) -> np.ndarray:
    """Conserved energy 0.5 x2^2 + (1 - cos x1) along (..., 2) states."""
    states = np.asarray(states, dtype=np.float64)
    return 0.5 * states[..., 1] ** 2 + (1.0 - np.cos(states[..., 0]))


def rd_rate(v: np.ndarray, diffusion: Sequence[float], dx: float) -> np.ndarray:
    """Rates on a (2, n_y, n_x) state: D_i laplacian + source_i."""
    c = 1.0 / (dx * dx)
    out = np.empty_like(v)
    for i in (0, 1):
        lap = np.zeros_like(v[i])
        lap[1:-1, 1:-1] = ((v[i][1:-1, 2:] + v[i][1:-1, :-2]
                            - 2.0 * v[i][1:-1, 1:-1]) * c
                           + (v[i][2:, 1:-1] + v[i][:-2, 1:-1]
                              - 2.0 * v[i][1:-1, 1:-1]) * c)
        if i == 0:
            s = v[0] - v[0] ** 3 - v[1] - 0.005
        else:
            s = 10.0 * (v[0] - v[1])
        out[i] = diffusion[i] * lap + s
    return out


def _mirror_edges(v: np.ndarray) -> np.ndarray:
    """Copy interior neighbors onto the edges, columns first then rows."""
    for i in range(v.shape[0]):
        v[i][:, 0] = v[i][:, 1]
        v[i][:, -1] = v[i][:, -2]
        v[i][0, :] = v[i][1, :]
        v[i][-1, :] = v[i][-2, :]
    return v


def pendulum_truth(grid: GridSpec, mu0: Sequence[float] = (0.0, 15.0),
                   method: str = "rk4") -> Trajectory:
    """Classical solve of the fully known pendulum on the grid's time axis."""
    if grid.n_points != 1 or grid.n_v != 2:
        raise DatagenError("pendulum grid must hold 2 variables at one point")
    step = _classical_step(method)
    y = np.asarray(mu0, dtype=np.float64).reshape(2)
    frames = np.empty((grid.n_t, 2))
    frames[0] = y
    t = 0.0
    for k in range(1, grid.n_t):
        y = step(pendulum_rate, y, t, grid.dt)
        t += grid.dt
        if not np.all(np.isfinite(y)):
            raise DatagenError(f"pendulum solve diverged at step {k} (dt={grid.dt})")
        frames[k] = y
    return Trajectory(grid=grid, frames=frames[:, :, None])


def rd_truth(grid: GridSpec, v0: np.ndarray,
             diffusion: Sequence[float] = (2.8e-4, 5.0e-2),
             method: str = "rk4") -> Trajectory:
    """Classical solve of the fully known reaction-diffusion system.

    Mirror boundary conditions are applied after every full step, matching
    the hybrid rollout.
    """
    if grid.n_points < 9 or grid.n_v != 2:
        raise DatagenError("reaction-diffusion grid must be 2 variables on >= 3x3")
    d = np.asarray(diffusion, dtype=np.float64)
    if d.shape != (2,) or np.any(d < 0):
        raise DatagenError("diffusion must be two non-negative coefficients")
    step = _classical_step(method)
    v = np.asarray(v0, dtype=np.float64).reshape(2, grid.n_y, grid.n_x).copy()
    rate = lambda y, t: rd_rate(y, d, grid.dx)
    frames = np.empty((grid.n_t, 2, grid.n_points))
    frames[0] = v.reshape(2, -1)
    t = 0.0
    for k in range(1, grid.n_t):
        v = _mirror_edges(step(rate, v, t, grid.dt))
        t += grid.dt
        if not np.all(np.isfinite(v)):
            limit = grid.dx ** 2 / (4.0 * d.max()) if d.max() > 0 else np.inf
            raise DatagenError(
                f"reaction-diffusion solve diverged at step {k}: explicit "
                f"stepping needs roughly dt <= dx^2/(4 max D) = {limit:.3g}, "
                f"got dt = {grid.dt}")
        frames[k] = v.reshape(2, -1)
    return Trajectory(grid=grid, frames=frames)


def _classical_step(method: str):
    if method not in _CLASSICAL_STEPS:
        raise DatagenError(f"unknown integrator {method!r}")
    return _CLASSICAL_STEPS[method]


def solve_truth(kind: str, grid: GridSpec, mu0, diffusion=None,
                method: str = "rk4") -> Trajectory:
    if kind == "pendulum":
        if diffusion is not None:
            raise DatagenError("pendulum has no diffusion term")
        return pendulum_truth(grid, mu0, method)
    if kind == "reaction_diffusion":
        if diffusion is None:
            diffusion = (2.8e-4, 5.0e-2)
        return rd_truth(grid, mu0, diffusion, method)
    raise DatagenError(f"unknown system kind {kind!r}")


# --- random fields -----------------------------------------------------------

def grf_initial(grid: GridSpec, length_scale: Optional[float] = None,
                amplitude: float = 1.0, seed=0) -> np.ndarray:
    """Stationary Gaussian random field with squared-exponential covariance.

    Synthesized spectrally on a 2x oversampled torus and cropped, so the
    periodic wrap never reaches the returned window. Returns a flattened
    (n_points,) field with pointwise std equal to amplitude.
    """
    if grid.n_x < 2 or grid.n_y < 2:
        raise DatagenError("random fields need a spatial grid")
    width = (grid.n_x - 1) * grid.dx
    if length_scale is None:
        length_scale = 0.2 * width
    if length_scale <= 0:
        raise DatagenError("length_scale must be positive")
    if amplitude < 0:
        raise DatagenError("amplitude must be non-negative")
    if amplitude == 0.0:
        return np.zeros(grid.n_points)
    mx, my = 2 * grid.n_x, 2 * grid.n_y
    tx = np.minimum(np.arange(mx), mx - np.arange(mx)) * grid.dx
    ty = np.minimum(np.arange(my), my - np.arange(my)) * grid.dy
    r2 = ty[:, None] ** 2 + tx[None, :] ** 2
    kernel = amplitude * amplitude * np.exp(-0.5 * r2 / length_scale ** 2)
    # circulant embedding: fft eigenvalues of the torus kernel, clipped at 0
    lam = np.maximum(np.fft.fft2(kernel).real, 0.0)
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((my, mx))
    fld = np.fft.ifft2(np.sqrt(lam) * np.fft.fft2(white)).real
    return fld[:grid.n_y, :grid.n_x].reshape(-1)


# --- observations ------------------------------------------------------------

def add_noise(traj: Trajectory, sigma, seed) -> Dataset:
    """Full observation table: every frame, variable, and point, with
    additive zero-mean Gaussian noise of per-variable std sigma."""
    g = traj.grid
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (g.n_v,))
    if np.any(sigma < 0):
        raise DatagenError("noise std must be non-negative")
    rng = np.random.default_rng(seed)
    noisy = traj.frames + rng.standard_normal(traj.frames.shape) * sigma[None, :, None]
    fi, vi, pi = np.indices(traj.frames.shape)
    return Dataset(grid=g, frames=fi.reshape(-1), var_idx=vi.reshape(-1),
                   points=pi.reshape(-1), values=noisy.reshape(-1))


@dataclass(frozen=True)
class CaseSpec:
    """Observation mask: which variables, over which time window.

    t_step of None keeps every frame in the window; otherwise frames at
    t_start, t_start + t_step, ... are kept and the step must be a multiple
    of the grid dt. interior_only drops boundary points on spatial grids.
    """

    variables: Tuple[int, ...]
    t_start: float
    t_stop: float
    t_step: Optional[float] = None
    interior_only: bool = False


def _aligned_index(t: float, dt: float, what: str) -> int:
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9:
        raise DatagenError(f"{what} {t} does not align with frame spacing {dt}")
    return k


def mask_case(data: Dataset, case: CaseSpec) -> Dataset:
    """Retain entries for the case's variables inside its time window."""
    g = data.grid
    variables = tuple(case.variables)
    if not variables:
        raise DatagenError("case must observe at least one variable")
    if any(v < 0 or v >= g.n_v for v in variables):
        raise DatagenError(f"case variables must lie in 0..{g.n_v - 1}")
    if case.t_stop < case.t_start:
        raise DatagenError("case window is reversed")
    k0 = _aligned_index(case.t_start, g.dt, "window start")
    k1 = _aligned_index(case.t_stop, g.dt, "window stop")
    if k0 < 0 or k1 >= g.n_t:
        raise DatagenError(f"window [{case.t_start}, {case.t_stop}] outside "
                           f"the trajectory extent of {g.n_t} frames")
    if case.t_step is None:
        stride = 1
    else:
        stride = _aligned_index(case.t_step, g.dt, "window step")
        if stride < 1:
            raise DatagenError("window step must be positive")
    kept_frames = np.arange(k0, k1 + 1, stride)
    keep = np.isin(data.frames, kept_frames) & np.isin(data.var_idx, variables)
    if case.interior_only:
        keep &= ~boundary_mask(g)[data.points]
    return Dataset(grid=g, frames=data.frames[keep], var_idx=data.var_idx[keep],
                   points=data.points[keep], values=data.values[keep])


# --- resolution transfer -----------------------------------------------------

def subsample(traj: Trajectory, coarse: GridSpec) -> Trajectory:
    """Nearest-index restriction of a fine solve onto a coarser grid."""
    fine = traj.grid
    if coarse.n_v != fine.n_v:
        raise DatagenError("variable counts differ")
    t_coarse = np.arange(coarse.n_t) * coarse.dt
    kf = np.rint(t_coarse / fine.dt).astype(np.int64)
    if kf[-1] >= fine.n_t:
        raise DatagenError("coarse time axis extends past the fine solve")
    if coarse.n_points == 1:
        if fine.n_points != 1:
            raise DatagenError("cannot restrict a field onto a single point")
        pidx = np.array([0])
    else:
        if fine.n_x < coarse.n_x or fine.n_y < coarse.n_y:
            raise DatagenError("coarse grid is finer than the source")
        ix = np.rint(np.arange(coarse.n_x) * (fine.n_x - 1)
                     / (coarse.n_x - 1)).astype(np.int64)
        iy = np.rint(np.arange(coarse.n_y) * (fine.n_y - 1)
                     / (coarse.n_y - 1)).astype(np.int64)
        pidx = (iy[:, None] * fine.n_x + ix[None, :]).reshape(-1)
    return Trajectory(grid=coarse, frames=traj.frames[kf][:, :, pidx])
