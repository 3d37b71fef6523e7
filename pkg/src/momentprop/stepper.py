"""Time integration of moment fields.

Euler and RK4 both advance means with the classical update and variances with
the squared-coefficient analogue, treating the stage rates as independent:

    Euler: mu' = mu + dt * mu_K1          var' = var + dt^2 * var_K1
    RK4:   mu' = mu + dt/6 (K1+2K2+2K3+K4) var' = var + dt^2/36 (K1+4K2+4K3+K4)

with intermediate stage states (mu + a dt mu_K, var + a^2 dt^2 var_K) for
a in {1/2, 1/2, 1}. An rhs is any callable rhs(state, t) -> MomentField of
per-variable moment rates. With all variances zero the updates reduce to the
classical integrators on the means; the plain and tape paths here (and the
reference data solver) keep the same operation order so that reduction is
exact, not just close.
"""
from __future__ import annotations

from typing import Callable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .moments import MomentField

# An rhs output is an ordinary MomentField playing the stage-moments role:
# mean holds the rate of the state mean, var the (non-negative) rate variance.
StageMoments = MomentField


class StepperError(Exception):
    pass


def _check_stage(fld: MomentField, label: str):
    if not (np.all(np.isfinite(fld.mean)) and np.all(np.isfinite(fld.var))):
        raise StepperError(f"non-finite rhs output at {label}")


def euler_step(state: MomentField, rhs: Callable, dt: float, t: float = 0.0) -> MomentField:
    if dt <= 0:
        raise StepperError(f"dt must be positive, got {dt}")
    k1 = rhs(state, t)
    _check_stage(k1, "stage 1")
    return MomentField(mean=state.mean + dt * k1.mean,
                       var=state.var + (dt * dt) * k1.var)


def rk4_step(state: MomentField, rhs: Callable, t: float, dt: float) -> MomentField:
    if dt <= 0:
        raise StepperError(f"dt must be positive, got {dt}")
    h = 0.5 * dt
    k1 = rhs(state, t)
    _check_stage(k1, "stage 1")
    s2 = MomentField(mean=state.mean + h * k1.mean, var=state.var + (h * h) * k1.var)
    k2 = rhs(s2, t + h)
    _check_stage(k2, "stage 2")
    s3 = MomentField(mean=state.mean + h * k2.mean, var=state.var + (h * h) * k2.var)
    k3 = rhs(s3, t + h)
    _check_stage(k3, "stage 3")
    s4 = MomentField(mean=state.mean + dt * k3.mean, var=state.var + (dt * dt) * k3.var)
    k4 = rhs(s4, t + dt)
    _check_stage(k4, "stage 4")
    acc_m = k1.mean + 2.0 * k2.mean + 2.0 * k3.mean + k4.mean
    acc_v = k1.var + 4.0 * k2.var + 4.0 * k3.var + k4.var
    return MomentField(mean=state.mean + (dt / 6.0) * acc_m,
                       var=state.var + ((dt * dt) / 36.0) * acc_v)


def rollout(state0: MomentField, rhs: Callable, dt: float, n_steps: int,
            method: str = "euler", t0: float = 0.0,
            post: Optional[Callable] = None) -> List[MomentField]:
    """Autoregressive integration keeping every frame (frame 0 is state0).

    ``post`` (e.g. a boundary condition) is applied to each stepped frame
    before it is stored and fed forward.
    """
    if method not in ("euler", "rk4"):
        raise StepperError(f"unknown method {method!r}")
    frames = [state0]
    state = state0
    t = t0
    for n in range(n_steps):
        try:
            if method == "euler":
                state = euler_step(state, rhs, dt, t)
            else:
                state = rk4_step(state, rhs, t, dt)
        except StepperError as e:
            raise StepperError(f"step {n + 1}: {e}") from e
        if post is not None:
            state = post(state)
        frames.append(state)
        t += dt
    return frames


# ---------------------------------------------------------------------------
# Tape variants. State travels as a pair of (P, n_v) Vars (mean, var); an rhs
# is rhs(mean, var, t) -> (rate_mean, rate_var) on the same tape.

TapeState = Tuple[ad.Var, ad.Var]


def _check_stage_tape(km: ad.Var, kv: ad.Var, label: str):
    if not (np.all(np.isfinite(km.value)) and np.all(np.isfinite(kv.value))):
        raise StepperError(f"non-finite rhs output at {label}")


def euler_step_tape(mean: ad.Var, var: ad.Var, rhs: Callable, dt: float,
                    t: float = 0.0) -> TapeState:
    km, kv = rhs(mean, var, t)
    _check_stage_tape(km, kv, "stage 1")
    return (ad.add(mean, ad.scale(km, dt)),
            ad.add(var, ad.scale(kv, dt * dt)))


def rk4_step_tape(mean: ad.Var, var: ad.Var, rhs: Callable, t: float,
                  dt: float) -> TapeState:
    h = 0.5 * dt
    k1m, k1v = rhs(mean, var, t)
    _check_stage_tape(k1m, k1v, "stage 1")
    s2 = (ad.add(mean, ad.scale(k1m, h)), ad.add(var, ad.scale(k1v, h * h)))
    k2m, k2v = rhs(s2[0], s2[1], t + h)
    _check_stage_tape(k2m, k2v, "stage 2")
    s3 = (ad.add(mean, ad.scale(k2m, h)), ad.add(var, ad.scale(k2v, h * h)))
    k3m, k3v = rhs(s3[0], s3[1], t + h)
    _check_stage_tape(k3m, k3v, "stage 3")
    s4 = (ad.add(mean, ad.scale(k3m, dt)), ad.add(var, ad.scale(k3v, dt * dt)))
    k4m, k4v = rhs(s4[0], s4[1], t + dt)
    _check_stage_tape(k4m, k4v, "stage 4")
    acc_m = ad.add(ad.add(ad.add(k1m, ad.scale(k2m, 2.0)), ad.scale(k3m, 2.0)), k4m)
    acc_v = ad.add(ad.add(ad.add(k1v, ad.scale(k2v, 4.0)), ad.scale(k3v, 4.0)), k4v)
    return (ad.add(mean, ad.scale(acc_m, dt / 6.0)),
            ad.add(var, ad.scale(acc_v, (dt * dt) / 36.0)))
