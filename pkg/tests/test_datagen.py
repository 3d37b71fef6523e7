"""Ground-truth generation: solver accuracy, noise statistics, masking."""
import numpy as np
import pytest
from scipy.integrate import solve_ivp

from momentprop import datagen, systems
from momentprop.datagen import (CaseSpec, DatagenError, Trajectory, add_noise,
                                grf_initial, mask_case, pendulum_energy,
                                pendulum_truth, rd_rate, rd_truth, solve_truth,
                                subsample)
from momentprop.moments import GridSpec
from momentprop.systems import SystemSpec


def ode_grid(dt=0.01, n_t=1001):
    return GridSpec.ode(2, dt=dt, n_t=n_t)


def square_grid(n, dt=1e-3, n_t=21):
    return GridSpec.unit_square(n, 2, dt=dt, n_t=n_t)


# --- classical steps ---------------------------------------------------------

def test_rk4_step_exact_on_linear_rhs():
    # dy/dt = y over one step has the exact degree-4 Taylor growth factor
    dt = 0.75
    y = datagen.classical_rk4_step(lambda y, t: y, np.array([1.0]), 0.0, dt)
    want = 1.0 + dt + dt ** 2 / 2 + dt ** 3 / 6 + dt ** 4 / 24
    np.testing.assert_allclose(y[0], want, rtol=1e-15)


def test_euler_step_frozen_example():
    y = datagen.classical_euler_step(lambda y, t: -2.0 * y, np.array([1.2]),
                                     0.0, 0.1)
    np.testing.assert_allclose(y[0], 0.96, rtol=1e-15)


# --- pendulum truth ----------------------------------------------------------

def test_pendulum_truth_matches_adaptive_reference():
    grid = ode_grid(dt=0.01, n_t=1001)
    traj = pendulum_truth(grid, mu0=(0.0, 1.5))
    ref = solve_ivp(lambda t, y: [y[1], -np.sin(y[0])], (0.0, 10.0),
                    [0.0, 1.5], t_eval=traj.times, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(traj.frames[:, :, 0], ref.y.T, atol=1e-6)


def test_pendulum_energy_drift_small():
    grid = ode_grid(dt=0.01, n_t=3001)
    traj = pendulum_truth(grid, mu0=(0.0, 15.0))
    e = pendulum_energy(traj.frames[:, :, 0])
    drift = np.max(np.abs(e - e[0])) / abs(e[0])
    assert drift < 1e-4


def test_pendulum_truth_deterministic_and_shaped():
    grid = ode_grid(dt=0.1, n_t=51)
    a = pendulum_truth(grid)
    b = pendulum_truth(grid)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.frames.shape == (51, 2, 1)
    with pytest.raises(DatagenError, match="one point"):
        pendulum_truth(square_grid(3))


# --- reaction-diffusion truth ------------------------------------------------

def test_rd_rate_uniform_equal_fields():
    # v1 = v2 = c uniform: laplacians vanish, s2 = 10 (c - c) = 0
    v = np.full((2, 5, 5), 0.3)
    out = rd_rate(v, (1e-3, 2e-3), dx=0.25)
    np.testing.assert_array_equal(out[1], np.zeros((5, 5)))
    np.testing.assert_allclose(out[0], -0.3 ** 3 - 0.005, rtol=1e-15)


def test_rd_truth_single_euler_step_uniform():
    grid = square_grid(5, dt=1e-3, n_t=2)
    c = 0.4
    traj = rd_truth(grid, np.full((2, 25), c), diffusion=(1e-3, 1e-3),
                    method="euler")
    np.testing.assert_allclose(traj.frames[1, 0], c + 1e-3 * (-c ** 3 - 0.005),
                               rtol=1e-14)
    np.testing.assert_allclose(traj.frames[1, 1], c, rtol=1e-15)


def test_rd_truth_matches_hybrid_zero_variance_rollout():
    n = 7
    grid = square_grid(n, dt=1e-3, n_t=21)
    rng = np.random.default_rng(4)
    v0 = 0.5 * rng.normal(size=(2, n * n))
    d = (2.8e-3, 5.0e-3)
    traj = rd_truth(grid, v0, diffusion=d, method="euler")
    spec = SystemSpec.reaction_diffusion(n=n, dt=1e-3, n_t=21, unknown="true",
                                         diffusion=d, method="euler")
    params = systems.build_params(spec, seed=0)
    frames = systems.rollout(spec, params, v0.reshape(2, -1), steps=20,
                             initial_var=0.0)
    for k in range(21):
        np.testing.assert_allclose(frames[k].mean, traj.frames[k],
                                    rtol=1e-12, atol=1e-13)


def test_rd_truth_divergence_diagnostic():
    grid = square_grid(10, dt=0.5, n_t=50)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DatagenError, match="dt <= dx\\^2"):
            rd_truth(grid, np.full((2, 100), 50.0), diffusion=(5e-2, 5e-2))


def test_solve_truth_dispatch():
    traj = solve_truth("pendulum", ode_grid(dt=0.1, n_t=11), (0.0, 1.0))
    assert traj.frames.shape == (11, 2, 1)
    with pytest.raises(DatagenError, match="diffusion"):
        solve_truth("pendulum", ode_grid(dt=0.1, n_t=11), (0.0, 1.0),
                    diffusion=(1.0, 1.0))
    with pytest.raises(DatagenError, match="kind"):
        solve_truth("wave", ode_grid(dt=0.1, n_t=11), (0.0, 1.0))
    grid = square_grid(5)
    traj = solve_truth("reaction_diffusion", grid, np.zeros((2, 25)),
                       diffusion=(2.8e-3, 5.0e-3))
    assert traj.frames.shape == (21, 2, 25)


# --- random fields -----------------------------------------------------------

def test_grf_zero_amplitude_and_determinism():
    grid = square_grid(12)
    np.testing.assert_array_equal(grf_initial(grid, amplitude=0.0, seed=3),
                                  np.zeros(144))
    a = grf_initial(grid, seed=5)
    b = grf_initial(grid, seed=5)
    np.testing.assert_array_equal(a, b)
    assert np.any(grf_initial(grid, seed=6) != a)
    assert a.shape == (144,)


def test_grf_pointwise_variance_matches_amplitude():
    grid = square_grid(16)
    amp = 0.7
    draws = np.stack([grf_initial(grid, length_scale=0.2, amplitude=amp, seed=s)
                      for s in range(200)])
    var = draws.var(axis=0).mean()
    assert abs(var - amp ** 2) / amp ** 2 < 0.10


def test_grf_fields_are_smooth_at_large_length_scale():
    grid = square_grid(16)
    draws = np.stack([grf_initial(grid, length_scale=0.3, seed=s)
                      for s in range(100)]).reshape(100, 16, 16)
    # neighbor correlation at lag dx should be near exp(-dx^2/(2 l^2)) ~ 0.998
    x = draws[:, :, :-1].ravel()
    y = draws[:, :, 1:].ravel()
    corr = np.corrcoef(x, y)[0, 1]
    assert corr > 0.9


def test_grf_rejects_point_grids():
    with pytest.raises(DatagenError, match="spatial"):
        grf_initial(ode_grid())


# --- noise -------------------------------------------------------------------

def test_add_noise_zero_sigma_reproduces_truth():
    grid = ode_grid(dt=0.1, n_t=21)
    traj = pendulum_truth(grid, mu0=(0.0, 2.0))
    ds = add_noise(traj, (0.0, 0.0), seed=0)
    assert ds.n_entries == 21 * 2
    for k in range(21):
        _, vals = ds.dense(k)
        np.testing.assert_array_equal(vals, traj.frames[k])


def test_add_noise_per_variable_std():
    grid = ode_grid(dt=0.01, n_t=5001)
    traj = pendulum_truth(grid, mu0=(0.0, 2.0))
    ds = add_noise(traj, (0.3, 0.6), seed=7)
    resid = ds.values.reshape(5001, 2) - traj.frames[:, :, 0]
    s = resid.std(axis=0)
    assert abs(s[0] - 0.3) / 0.3 < 0.05
    assert abs(s[1] - 0.6) / 0.6 < 0.05
    again = add_noise(traj, (0.3, 0.6), seed=7)
    np.testing.assert_array_equal(ds.values, again.values)
    assert np.any(add_noise(traj, (0.3, 0.6), seed=8).values != ds.values)


def test_add_noise_rejects_negative_sigma():
    traj = pendulum_truth(ode_grid(dt=0.1, n_t=5), mu0=(0.0, 1.0))
    with pytest.raises(DatagenError, match="non-negative"):
        add_noise(traj, (-0.1, 0.3), seed=0)


# --- case masking ------------------------------------------------------------

def full_pendulum_dataset(n_t=301, dt=0.1, seed=0):
    traj = pendulum_truth(GridSpec.ode(2, dt=dt, n_t=n_t), mu0=(0.0, 2.0))
    return add_noise(traj, (0.3, 0.6), seed=seed)


def test_mask_case_complete_window():
    ds = full_pendulum_dataset()
    out = mask_case(ds, CaseSpec(variables=(0, 1), t_start=0.0, t_stop=20.0,
                                 t_step=0.1))
    assert out.n_entries == 201 * 2
    assert out.max_frame == 200


def test_mask_case_late_start_and_single_variable():
    ds = full_pendulum_dataset()
    late = mask_case(ds, CaseSpec(variables=(0, 1), t_start=5.0, t_stop=20.0,
                                  t_step=0.1))
    assert late.n_entries == 151 * 2
    assert late.frames.min() == 50
    only_x2 = mask_case(ds, CaseSpec(variables=(1,), t_start=0.0, t_stop=20.0,
                                     t_step=0.1))
    assert only_x2.n_entries == 201
    assert np.all(only_x2.var_idx == 1)


def test_mask_case_output_is_subset_of_input():
    ds = full_pendulum_dataset()
    out = mask_case(ds, CaseSpec(variables=(1,), t_start=1.0, t_stop=3.0))
    inp = {(f, v, p): val for f, v, p, val in
           zip(ds.frames, ds.var_idx, ds.points, ds.values)}
    for f, v, p, val in zip(out.frames, out.var_idx, out.points, out.values):
        assert inp[(f, v, p)] == val


def test_mask_case_interior_only():
    grid = square_grid(5, dt=0.1, n_t=3)
    traj = rd_truth(grid, np.zeros((2, 25)), diffusion=(1e-3, 1e-3))
    ds = add_noise(traj, (0.05, 0.05), seed=1)
    out = mask_case(ds, CaseSpec(variables=(1,), t_start=0.0, t_stop=0.2,
                                 interior_only=True))
    assert out.n_entries == 3 * 9
    from momentprop.spatial import boundary_mask
    assert not np.any(boundary_mask(grid)[out.points])


def test_mask_case_validation():
    ds = full_pendulum_dataset()
    with pytest.raises(DatagenError, match="extent"):
        mask_case(ds, CaseSpec(variables=(0,), t_start=0.0, t_stop=40.0))
    with pytest.raises(DatagenError, match="align"):
        mask_case(ds, CaseSpec(variables=(0,), t_start=0.0, t_stop=1.0,
                               t_step=0.15))
    with pytest.raises(DatagenError, match="variables"):
        mask_case(ds, CaseSpec(variables=(2,), t_start=0.0, t_stop=1.0))
    empty = mask_case(ds, CaseSpec(variables=(0,), t_start=0.0, t_stop=0.0))
    assert empty.n_entries == 1  # single frame, single variable


# --- subsampling -------------------------------------------------------------

def test_subsample_time_axis_picks_exact_frames():
    fine = ode_grid(dt=0.01, n_t=301)
    traj = pendulum_truth(fine, mu0=(0.0, 2.0))
    coarse = GridSpec.ode(2, dt=0.1, n_t=31)
    out = subsample(traj, coarse)
    np.testing.assert_array_equal(out.frames, traj.frames[::10])


def test_subsample_space_picks_exact_columns():
    fine = square_grid(9, dt=1e-3, n_t=3)
    rng = np.random.default_rng(2)
    traj = Trajectory(grid=fine, frames=rng.normal(size=(3, 2, 81)))
    coarse = square_grid(5, dt=1e-3, n_t=3)
    out = subsample(traj, coarse)
    ix = np.array([0, 2, 4, 6, 8])
    pidx = (ix[:, None] * 9 + ix[None, :]).reshape(-1)
    np.testing.assert_array_equal(out.frames, traj.frames[:, :, pidx])


def test_subsample_validation():
    fine = ode_grid(dt=0.01, n_t=101)
    traj = pendulum_truth(fine, mu0=(0.0, 2.0))
    with pytest.raises(DatagenError, match="past the fine solve"):
        subsample(traj, GridSpec.ode(2, dt=0.1, n_t=12))
    with pytest.raises(DatagenError, match="single point"):
        subsample(Trajectory(grid=square_grid(5, n_t=3),
                             frames=np.zeros((3, 2, 25))),
                  GridSpec.ode(2, dt=1e-3, n_t=2))
