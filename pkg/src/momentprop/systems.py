"""Hybrid moment systems: known physics plus learned closure terms.

Two assemblies are provided. The pendulum ODE has state (x1, x2) at a single
point: d(x1)/dt comes from the learned moment network (fed both variables'
moments) and d(x2)/dt from the unscented transform of -sin over x1. The
reaction-diffusion PDE has state (v1, v2) on a grid: each rate is
D_i * laplacian + source, where source 1 is the known cubic term propagated
by a pointwise unscented transform and source 2 is the learned network.

Trainable parameters travel in a flat ParamVector laid out [lam | nn | sig0]:
log diffusion coefficients (empty when diffusion is fixed), network weights,
and log initial variances (one per state variable). Log storage keeps the
physical quantities positive without constrained optimization.

Every system runs on two parallel paths that share operation order: a plain
numpy path over MomentFields for data generation and prediction, and a tape
path for training, differentiable end to end through the rollout. The
network can be swapped for the true closure term (``unknown="true"``) to
cross-check rollouts against classical solvers.

Network inputs and rate outputs pass through a per-variable affine
normalization (``NormSpec``); identity constants leave the behavior
unchanged, and ``norm_from_samples`` estimates constants from observed data
only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import neural
from . import spatial
from . import stepper
from . import unscented as ut
from .moments import GridSpec, MomentError, MomentField
from .neural import MomentMlpSpec
from .unscented import DEFAULT_UT, UtConfig

# numeric failures inside a rollout step surface as SystemError aborts
_STEP_ERRORS = (stepper.StepperError, ut.UtError, neural.NeuralError, MomentError)


class SystemError(Exception):
    pass


@dataclass(frozen=True)
class NormSpec:
    """Per-variable affine normalization around the moment network.

    State channels enter as (x - in_center) / in_scale (variances divided by
    in_scale^2); the network's rate outputs leave as
    out_center + out_scale * raw (variances times out_scale^2).
    """

    in_center: np.ndarray
    in_scale: np.ndarray
    out_center: np.ndarray
    out_scale: np.ndarray

    def __post_init__(self):
        for name in ("in_center", "in_scale", "out_center", "out_scale"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1:
                raise SystemError(f"{name} must be a vector, got shape {arr.shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not (self.in_center.shape == self.in_scale.shape
                == self.out_center.shape == self.out_scale.shape):
            raise SystemError("normalization constant lengths differ")
        if np.any(self.in_scale <= 0) or np.any(self.out_scale <= 0):
            raise SystemError("normalization scales must be positive")

    @property
    def n_v(self) -> int:
        return self.in_center.size

    @classmethod
    def identity(cls, n_v: int) -> "NormSpec":
        return cls(in_center=np.zeros(n_v), in_scale=np.ones(n_v),
                   out_center=np.zeros(n_v), out_scale=np.ones(n_v))

    def as_dict(self) -> dict:
        return {"in_center": self.in_center.tolist(), "in_scale": self.in_scale.tolist(),
                "out_center": self.out_center.tolist(), "out_scale": self.out_scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormSpec":
        return cls(in_center=d["in_center"], in_scale=d["in_scale"],
                   out_center=d["out_center"], out_scale=d["out_scale"])


def norm_from_samples(n_v: int, samples: Dict[int, np.ndarray], obs_dt: float,
                      scale_floor: float = 1e-3) -> NormSpec:
    """Estimate normalization constants from observed values only.

    ``samples[i]`` holds variable i's observations as (n_frames,) or
    (n_frames, n_points) in time order at spacing ``obs_dt``; rate constants
    come from its first differences. Unobserved variables keep identity.
    """
    in_center, in_scale = np.zeros(n_v), np.ones(n_v)
    out_center, out_scale = np.zeros(n_v), np.ones(n_v)
    for i, arr in samples.items():
        if not 0 <= i < n_v:
            raise SystemError(f"sample variable index {i} outside 0..{n_v - 1}")
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        in_center[i] = arr.mean()
        in_scale[i] = max(arr.std(), scale_floor)
        if arr.shape[0] >= 2:
            rates = np.diff(arr, axis=0) / obs_dt
            out_center[i] = rates.mean()
            out_scale[i] = max(rates.std(), scale_floor)
    return NormSpec(in_center=in_center, in_scale=in_scale,
                    out_center=out_center, out_scale=out_scale)


@dataclass(frozen=True)
class SystemSpec:
    """One hybrid system: kind, grid, surrogate shape, and fixed constants."""

    kind: str
    grid: GridSpec
    mlp: MomentMlpSpec
    ut: UtConfig = DEFAULT_UT
    method: str = "euler"
    norm: Optional[NormSpec] = None
    diffusion: Optional[Tuple[float, float]] = None
    unknown: str = "nn"

    def __post_init__(self):
        if self.kind not in ("pendulum", "reaction_diffusion"):
            raise SystemError(f"unknown system kind {self.kind!r}")
        if self.method not in ("euler", "rk4"):
            raise SystemError(f"unknown integrator {self.method!r}")
        if self.unknown not in ("nn", "true"):
            raise SystemError(f"unknown closure mode {self.unknown!r}")
        if self.grid.n_v != 2:
            raise SystemError(f"systems have 2 state variables, grid has {self.grid.n_v}")
        if self.kind == "pendulum":
            if self.grid.n_points != 1:
                raise SystemError("pendulum state lives at a single point")
            if self.diffusion is not None:
                raise SystemError("pendulum has no diffusion term")
        else:
            if self.grid.n_x < 3 or self.grid.n_y < 3:
                raise SystemError("reaction-diffusion needs at least a 3x3 grid")
            if self.diffusion is not None and len(self.diffusion) != 2:
                raise SystemError("fixed diffusion needs one coefficient per variable")
        if self.mlp.n_in_vars != 2 or self.mlp.n_out_vars != 2:
            raise SystemError("the surrogate consumes and emits one moment pair per variable")
        if self.norm is None:
            object.__setattr__(self, "norm", NormSpec.identity(2))
        elif self.norm.n_v != 2:
            raise SystemError("normalization constants must cover both variables")

    @property
    def n_lam(self) -> int:
        return 2 if (self.kind == "reaction_diffusion" and self.diffusion is None) else 0

    # index of the variable whose rate the network supplies (its output pair)
    @property
    def unknown_index(self) -> int:
        return 0 if self.kind == "pendulum" else 1

    @classmethod
    def pendulum(cls, dt: float, n_t: int, **kw) -> "SystemSpec":
        return cls(kind="pendulum", grid=GridSpec.ode(n_v=2, dt=dt, n_t=n_t),
                   mlp=MomentMlpSpec.ode_preset(), **kw)

    @classmethod
    def reaction_diffusion(cls, n: int, dt: float, n_t: int, **kw) -> "SystemSpec":
        return cls(kind="reaction_diffusion", grid=GridSpec.unit_square(n, n_v=2, dt=dt, n_t=n_t),
                   mlp=MomentMlpSpec.pde_preset(), **kw)


# ---------------------------------------------------------------------------
# Parameter vector

SIG0_INIT = float(np.log(1e-2))
LAM_INIT = -6.0


class ParamVector:
    """Flat trainable parameters with fixed [lam | nn | sig0] segments."""

    __slots__ = ("flat", "n_lam", "n_nn", "n_v")

    def __init__(self, flat, n_lam: int, n_nn: int, n_v: int):
        flat = np.array(flat, dtype=np.float64)
        if flat.shape != (n_lam + n_nn + n_v,):
            raise SystemError(
                f"expected {n_lam + n_nn + n_v} parameters "
                f"({n_lam} lam + {n_nn} nn + {n_v} sig0), got shape {flat.shape}")
        self.flat = flat
        self.n_lam = n_lam
        self.n_nn = n_nn
        self.n_v = n_v

    @property
    def lam(self) -> np.ndarray:
        return self.flat[:self.n_lam]

    @property
    def nn(self) -> np.ndarray:
        return self.flat[self.n_lam:self.n_lam + self.n_nn]

    @property
    def sig0(self) -> np.ndarray:
        return self.flat[self.n_lam + self.n_nn:]

    def copy(self) -> "ParamVector":
        return ParamVector(self.flat.copy(), self.n_lam, self.n_nn, self.n_v)

    def __len__(self) -> int:
        return self.flat.size


def params_for(spec: SystemSpec, flat) -> ParamVector:
    return ParamVector(flat, spec.n_lam, neural.param_count(spec.mlp), spec.grid.n_v)


def build_params(spec: SystemSpec, seed: int) -> ParamVector:
    """Freshly initialized parameters: Glorot network, log-space constants."""
    segs = [np.full(spec.n_lam, LAM_INIT),
            neural.init_params(spec.mlp, seed),
            np.full(spec.grid.n_v, SIG0_INIT)]
    return params_for(spec, np.concatenate(segs))


# ---------------------------------------------------------------------------
# Plain path (numpy MomentFields); used for data generation and prediction.

def _s1_plain(pts: np.ndarray) -> np.ndarray:
    x1 = pts[:, 0:1]
    x2 = pts[:, 1:2]
    return x1 - x1 ** 3 - x2 - 0.005


def _nn_rates_plain(spec: SystemSpec, params: ParamVector,
                    mu_rows: np.ndarray, var_rows: np.ndarray):
    """Network rates for the unknown variable, (P,) mean and variance."""
    n = spec.norm
    mu_n = (mu_rows - n.in_center) / n.in_scale
    var_n = var_rows / (n.in_scale * n.in_scale)
    m_out, v_out = neural.mlp_forward(spec.mlp, params.nn, mu_n, var_n)
    k = spec.unknown_index
    m = n.out_center[k] + n.out_scale[k] * m_out[:, k]
    v = (n.out_scale[k] * n.out_scale[k]) * v_out[:, k]
    return m, v


def hamiltonian_rhs(state: MomentField, spec: SystemSpec, params: ParamVector) -> MomentField:
    """Pendulum moment rates: learned d(x1)/dt, unscented -sin for d(x2)/dt."""
    mu_rows = state.mean.T  # (1, 2)
    var_rows = state.var.T
    if spec.unknown == "true":
        m1 = state.mean[1].copy()
        v1 = state.var[1].copy()
    else:
        m1, v1 = _nn_rates_plain(spec, params, mu_rows, var_rows)
    m2, v2 = ut.ut_propagate_batch(lambda pts: -np.sin(pts),
                                   mu_rows[:, 0:1], var_rows[:, 0:1], spec.ut)
    return MomentField(mean=np.stack([m1, m2[:, 0]]), var=np.stack([v1, v2[:, 0]]))


def rd_rhs(state: MomentField, spec: SystemSpec, params: ParamVector) -> MomentField:
    """Reaction-diffusion moment rates: D_i laplacian + source terms."""
    lap = spatial.laplacian(state, spec.grid)
    if spec.diffusion is None:
        d = np.exp(params.lam)
    else:
        d = np.asarray(spec.diffusion, dtype=np.float64)
    mu_rows = state.mean.T  # (P, 2)
    var_rows = state.var.T
    m_s1, v_s1 = ut.ut_propagate_batch(_s1_plain, mu_rows, var_rows, spec.ut)
    if spec.unknown == "true":
        m_s2 = 10.0 * (state.mean[0] - state.mean[1])
        v_s2 = 100.0 * (state.var[0] + state.var[1])
    else:
        m_s2, v_s2 = _nn_rates_plain(spec, params, mu_rows, var_rows)
    mean = np.stack([d[0] * lap.mean[0] + m_s1[:, 0],
                     d[1] * lap.mean[1] + m_s2])
    var = np.stack([(d[0] * d[0]) * lap.var[0] + v_s1[:, 0],
                    (d[1] * d[1]) * lap.var[1] + v_s2])
    return MomentField(mean=mean, var=var)


def make_rhs(spec: SystemSpec, params: ParamVector):
    if spec.kind == "pendulum":
        return lambda state, t: hamiltonian_rhs(state, spec, params)
    return lambda state, t: rd_rhs(state, spec, params)


def initial_field(spec: SystemSpec, params: ParamVector, mu0,
                  initial_var=None) -> MomentField:
    """Frame 0: given means, exp(sig0) variance per variable (overridable)."""
    mu0 = np.asarray(mu0, dtype=np.float64)
    if mu0.ndim == 1:
        mu0 = mu0[:, None]
    if mu0.shape != (spec.grid.n_v, spec.grid.n_points):
        raise SystemError(
            f"initial mean must be ({spec.grid.n_v}, {spec.grid.n_points}), got {mu0.shape}")
    if initial_var is None:
        v0 = np.repeat(np.exp(params.sig0)[:, None], spec.grid.n_points, axis=1)
    else:
        v0 = np.broadcast_to(np.asarray(initial_var, dtype=np.float64), mu0.shape).copy()
    return MomentField(mean=mu0, var=v0)


def rollout(spec: SystemSpec, params: ParamVector, mu0, steps: int,
            initial_var=None) -> List[MomentField]:
    """Plain autoregressive rollout; frame 0 included, boundary applied after
    each step for grid systems."""
    state0 = initial_field(spec, params, mu0, initial_var)
    rhs = make_rhs(spec, params)
    post = None
    if spec.kind == "reaction_diffusion":
        post = lambda fld: spatial.apply_neumann(fld, spec.grid)
    try:
        return stepper.rollout(state0, rhs, spec.grid.dt, steps, method=spec.method, post=post)
    except _STEP_ERRORS as e:
        raise SystemError(f"rollout aborted: {e}") from e


# ---------------------------------------------------------------------------
# Tape path (training). State travels as (P, n_v) Vars.

@dataclass
class LiftedParams:
    """ParamVector leaves on a tape, in segment order."""

    lam: Optional[ad.Var]
    nn: List[Tuple[ad.Var, ad.Var]]
    sig0: ad.Var


def lift_params(spec: SystemSpec, params: ParamVector, tape: ad.Tape,
                needs_grad: bool = True) -> LiftedParams:
    lam = None
    if spec.n_lam:
        lam = tape.leaf(params.lam[None, :], needs_grad=needs_grad)
    nn = neural.lift_params(spec.mlp, params.nn, tape, needs_grad=needs_grad)
    sig0 = tape.leaf(params.sig0[None, :], needs_grad=needs_grad)
    return LiftedParams(lam=lam, nn=nn, sig0=sig0)


def grads_to_flat(spec: SystemSpec, lifted: LiftedParams, grads: ad.Grads) -> np.ndarray:
    """Gradient segments flattened back into ParamVector layout."""
    parts = []
    if lifted.lam is not None:
        parts.append(grads.wrt(lifted.lam).ravel())
    parts.append(neural.grads_to_segment(lifted.nn, grads))
    parts.append(grads.wrt(lifted.sig0).ravel())
    return np.concatenate(parts)


def _make_nn_rates_tape(spec: SystemSpec, lifted: LiftedParams, tape: ad.Tape):
    """Closure computing the network's rate pair; consts lifted once."""
    n = spec.norm
    n_pts = spec.grid.n_points
    k = spec.unknown_index
    c = tape.const(np.broadcast_to(n.in_center, (n_pts, 2)).copy())
    s = tape.const(np.broadcast_to(n.in_scale, (n_pts, 2)).copy())
    s2 = tape.const(np.broadcast_to(n.in_scale * n.in_scale, (n_pts, 2)).copy())
    rc = tape.const(np.full((n_pts, 1), n.out_center[k]))
    rs = float(n.out_scale[k])

    def nn_rates(mean, var):
        mu_n = ad.div(ad.sub(mean, c), s)
        var_n = ad.div(var, s2)
        m_out, v_out = neural.mlp_forward_tape(spec.mlp, lifted.nn, mu_n, var_n)
        m = ad.add(ad.scale(m_out[:, k:k + 1], rs), rc)
        v = ad.scale(v_out[:, k:k + 1], rs * rs)
        return m, v

    return nn_rates


def _make_rhs_tape(spec: SystemSpec, lifted: LiftedParams, tape: ad.Tape):
    n_pts = spec.grid.n_points
    nn_rates = None
    if spec.unknown == "nn":
        nn_rates = _make_nn_rates_tape(spec, lifted, tape)

    if spec.kind == "pendulum":
        def rhs(mean, var, t):
            if spec.unknown == "true":
                m1, v1 = mean[:, 1:2], var[:, 1:2]
            else:
                m1, v1 = nn_rates(mean, var)
            m2, v2 = ut.ut_propagate_tape(lambda X: ad.neg(ad.sin(X)),
                                          mean[:, 0:1], var[:, 0:1], spec.ut)
            return ad.concat([m1, m2], axis=1), ad.concat([v1, v2], axis=1)

        return rhs

    st_mean, st_var = spatial.laplacian_stencils(spec.grid)
    lap_m_mat = tape.const(st_mean.matrix)
    lap_v_mat = tape.const(st_var.matrix)
    ones = tape.ones((n_pts, 1))
    if spec.diffusion is None:
        d_row = ad.exp(lifted.lam)
    else:
        d_row = tape.const(np.asarray(spec.diffusion, dtype=np.float64)[None, :])
    d_cols = ad.matmul(ones, d_row)
    d2_cols = ad.mul(d_cols, d_cols)

    def s1_tape(X):
        x1 = X[:, 0:1]
        x2 = X[:, 1:2]
        return x1 - ad.powc(x1, 3.0) - x2 - 0.005

    def rhs(mean, var, t):
        lap_m = ad.matmul(lap_m_mat, mean)
        lap_v = ad.matmul(lap_v_mat, var)
        m_s1, v_s1 = ut.ut_propagate_tape(s1_tape, mean, var, spec.ut)
        if spec.unknown == "true":
            m_s2 = ad.scale(ad.sub(mean[:, 0:1], mean[:, 1:2]), 10.0)
            v_s2 = ad.scale(ad.add(var[:, 0:1], var[:, 1:2]), 100.0)
        else:
            m_s2, v_s2 = nn_rates(mean, var)
        k_mean = ad.add(ad.mul(d_cols, lap_m), ad.concat([m_s1, m_s2], axis=1))
        k_var = ad.add(ad.mul(d2_cols, lap_v), ad.concat([v_s1, v_s2], axis=1))
        return k_mean, k_var

    return rhs


@dataclass
class TapeRollout:
    """A differentiable rollout: frames as (P, n_v) Vars plus the leaves."""

    tape: ad.Tape
    lifted: LiftedParams
    means: List[ad.Var]
    vars_: List[ad.Var]

    def frame(self, k: int) -> MomentField:
        return MomentField(mean=self.means[k].value.T, var=self.vars_[k].value.T)


def rollout_tape(spec: SystemSpec, params: ParamVector, mu0, steps: int,
                 initial_var=None, needs_grad: bool = True) -> TapeRollout:
    """Training rollout on a fresh tape; mirrors ``rollout`` step for step."""
    mu0 = np.asarray(mu0, dtype=np.float64)
    if mu0.ndim == 1:
        mu0 = mu0[:, None]
    if mu0.shape != (spec.grid.n_v, spec.grid.n_points):
        raise SystemError(
            f"initial mean must be ({spec.grid.n_v}, {spec.grid.n_points}), got {mu0.shape}")
    tape = ad.Tape()
    lifted = lift_params(spec, params, tape, needs_grad=needs_grad)
    n_pts = spec.grid.n_points
    mean = tape.const(mu0.T)
    if initial_var is None:
        var = ad.matmul(tape.ones((n_pts, 1)), ad.exp(lifted.sig0))
    else:
        v0 = np.broadcast_to(np.asarray(initial_var, dtype=np.float64), mu0.shape)
        var = tape.const(v0.T.copy())

    rhs = _make_rhs_tape(spec, lifted, tape)
    bc_mean = bc_var = None
    if spec.kind == "reaction_diffusion":
        nm, nv = spatial.neumann_stencils(spec.grid)
        bc_mean = tape.const(nm.matrix)
        bc_var = tape.const(nv.matrix)

    means, vars_ = [mean], [var]
    t = 0.0
    dt = spec.grid.dt
    for k in range(1, steps + 1):
        try:
            if spec.method == "euler":
                mean, var = stepper.euler_step_tape(mean, var, rhs, dt, t)
            else:
                mean, var = stepper.rk4_step_tape(mean, var, rhs, t, dt)
        except _STEP_ERRORS as e:
            raise SystemError(f"rollout aborted at step {k}: {e}") from e
        if bc_mean is not None:
            mean = ad.matmul(bc_mean, mean)
            var = ad.matmul(bc_var, var)
        if not (np.all(np.isfinite(mean.value)) and np.all(np.isfinite(var.value))):
            raise SystemError(f"rollout aborted at step {k}: non-finite state")
        means.append(mean)
        vars_.append(var)
        t += dt
    return TapeRollout(tape=tape, lifted=lifted, means=means, vars_=vars_)
