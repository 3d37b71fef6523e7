"""Hybrid systems: frozen rhs values, classical-solver reduction oracles,
plain/tape agreement, and gradients through full rollouts."""
import numpy as np
import pytest

from momentprop import autodiff as ad
from momentprop import neural, systems
from momentprop import unscented as ut
from momentprop.moments import MomentField
from momentprop.systems import NormSpec, SystemError, SystemSpec


def pendulum_spec(**kw):
    kw.setdefault("dt", 0.1)
    kw.setdefault("n_t", 10)
    return SystemSpec.pendulum(**kw)


def rd_spec(**kw):
    kw.setdefault("n", 5)
    kw.setdefault("dt", 0.001)
    kw.setdefault("n_t", 10)
    return SystemSpec.reaction_diffusion(**kw)


def state_of(mean, var):
    return MomentField(mean=np.asarray(mean, dtype=np.float64),
                       var=np.asarray(var, dtype=np.float64))


# --- oracles -----------------------------------------------------------------

def classical_pendulum_rk4(y, t, dt):
    def f(y, t):
        return np.array([y[1], -np.sin(y[0])])

    h = 0.5 * dt
    k1 = f(y, t)
    k2 = f(y + h * k1, t + h)
    k3 = f(y + h * k2, t + h)
    k4 = f(y + dt * k3, t + dt)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def classical_rd_euler(v, dt, h, d):
    """One Euler step of the reaction-diffusion system on (2, n, n) arrays,
    mirror boundary applied column-copies-first like the model."""
    c = 1.0 / (h * h)
    out = np.empty_like(v)
    for i in (0, 1):
        lap = np.zeros_like(v[i])
        lap[1:-1, 1:-1] = ((v[i][1:-1, 2:] + v[i][1:-1, :-2] - 2.0 * v[i][1:-1, 1:-1]) * c
                           + (v[i][2:, 1:-1] + v[i][:-2, 1:-1] - 2.0 * v[i][1:-1, 1:-1]) * c)
        if i == 0:
            s = v[0] - v[0] ** 3 - v[1] - 0.005
        else:
            s = 10.0 * (v[0] - v[1])
        out[i] = v[i] + dt * (d[i] * lap + s)
    for i in (0, 1):
        out[i][:, 0] = out[i][:, 1]
        out[i][:, -1] = out[i][:, -2]
        out[i][0, :] = out[i][1, :]
        out[i][-1, :] = out[i][-2, :]
    return out


# --- parameter layout --------------------------------------------------------

def test_param_layout_sizes_and_inits():
    p_spec = pendulum_spec()
    rd = rd_spec()
    rd_fixed = rd_spec(diffusion=(1e-3, 2e-3))
    pp = systems.build_params(p_spec, seed=0)
    rp = systems.build_params(rd, seed=0)
    fp = systems.build_params(rd_fixed, seed=0)
    assert len(pp) == 0 + 148 + 2
    assert len(rp) == 2 + 1348 + 2
    assert len(fp) == 0 + 1348 + 2
    np.testing.assert_array_equal(rp.lam, [-6.0, -6.0])
    np.testing.assert_array_equal(pp.sig0, np.log(1e-2) * np.ones(2))
    np.testing.assert_array_equal(systems.build_params(rd, seed=0).flat, rp.flat)
    assert np.any(systems.build_params(rd, seed=1).nn != rp.nn)


def test_param_vector_segment_views_and_errors():
    spec = rd_spec()
    p = systems.build_params(spec, seed=3)
    p.lam[0] = -4.0
    assert p.flat[0] == -4.0
    with pytest.raises(SystemError, match="1352"):
        systems.params_for(spec, np.zeros(1351))


def test_spec_validation():
    with pytest.raises(SystemError, match="kind"):
        SystemSpec(kind="wave", grid=pendulum_spec().grid,
                   mlp=neural.MomentMlpSpec.ode_preset())
    with pytest.raises(SystemError, match="diffusion"):
        pendulum_spec(diffusion=(1.0, 1.0))
    with pytest.raises(SystemError, match="3x3"):
        rd_spec(n=2)
    with pytest.raises(SystemError, match="integrator"):
        pendulum_spec(method="leapfrog")


# --- rhs frozen examples -----------------------------------------------------

def test_pendulum_known_branch_examples():
    spec = pendulum_spec(unknown="true")
    params = systems.build_params(spec, seed=0)
    out = systems.hamiltonian_rhs(state_of([[0.0], [0.0]], [[0.0], [0.0]]), spec, params)
    np.testing.assert_array_equal(out.mean, [[0.0], [0.0]])
    np.testing.assert_array_equal(out.var, [[0.0], [0.0]])

    out = systems.hamiltonian_rhs(state_of([[np.pi / 2], [0.0]], [[0.0], [0.0]]), spec, params)
    np.testing.assert_allclose(out.mean[1, 0], -1.0, rtol=1e-15)
    np.testing.assert_array_equal(out.var[1], [0.0])

    out = systems.hamiltonian_rhs(state_of([[0.0], [0.0]], [[0.01], [0.0]]), spec, params)
    assert out.mean[1, 0] == 0.0
    np.testing.assert_allclose(out.var[1, 0], np.sin(0.1) ** 2, rtol=1e-13)


def test_pendulum_true_closure_copies_x2_moments():
    spec = pendulum_spec(unknown="true")
    params = systems.build_params(spec, seed=0)
    out = systems.hamiltonian_rhs(state_of([[0.3], [2.5]], [[0.1], [0.7]]), spec, params)
    assert out.mean[0, 0] == 2.5
    assert out.var[0, 0] == 0.7


def test_rd_source_terms_at_frozen_points():
    spec = rd_spec(unknown="true", diffusion=(1.0, 1.0))
    params = systems.build_params(spec, seed=0)
    P = spec.grid.n_points
    # uniform (0, 0), zero variance: s1 = -0.005 everywhere, s2 = 0
    out = systems.rd_rhs(state_of(np.zeros((2, P)), np.zeros((2, P))), spec, params)
    np.testing.assert_allclose(out.mean[0], -0.005, rtol=1e-14)
    np.testing.assert_array_equal(out.mean[1], np.zeros(P))
    # uniform (1, 0): s2 = 10 (1 - 0) = 10
    out = systems.rd_rhs(state_of(np.stack([np.ones(P), np.zeros(P)]),
                                  np.zeros((2, P))), spec, params)
    np.testing.assert_array_equal(out.mean[1], np.full(P, 10.0))


def test_rd_diffusion_variance_composition():
    # uniform variance s: interior rate variance = D^2 (12 s / h^4) + var(s_i)
    spec = rd_spec(unknown="true", diffusion=(3e-3, 7e-3))
    params = systems.build_params(spec, seed=0)
    g = spec.grid
    s = 0.04
    mu = np.stack([np.full(g.n_points, 0.3), np.full(g.n_points, -0.2)])
    var = np.full((2, g.n_points), s)
    out = systems.rd_rhs(state_of(mu, var), spec, params)
    _, v_s1 = ut.ut_propagate(lambda X: X[:, 0:1] - X[:, 0:1] ** 3 - X[:, 1:2] - 0.005,
                              mu[:, 0], var[:, 0], spec.ut)
    v_s2 = 100.0 * (s + s)
    interior = np.array([j * g.n_x + i for j in range(1, g.n_y - 1)
                         for i in range(1, g.n_x - 1)])
    lap12 = 12.0 * s / g.dx ** 4
    np.testing.assert_allclose(out.var[0, interior],
                               (3e-3) ** 2 * lap12 + v_s1[0], rtol=1e-12)
    np.testing.assert_allclose(out.var[1, interior],
                               (7e-3) ** 2 * lap12 + v_s2, rtol=1e-12)
    # boundary rows carry only the source variance
    boundary = np.setdiff1d(np.arange(g.n_points), interior)
    np.testing.assert_allclose(out.var[1, boundary], v_s2, rtol=1e-12)


def test_trainable_diffusion_reads_exp_lam():
    spec = rd_spec(unknown="true")
    params = systems.build_params(spec, seed=0)
    params.lam[:] = [np.log(2e-3), np.log(4e-3)]
    g = spec.grid
    rng = np.random.default_rng(5)
    mu = rng.normal(size=(2, g.n_points))
    state = state_of(mu, np.zeros((2, g.n_points)))
    got = systems.rd_rhs(state, spec, params)
    want = systems.rd_rhs(state, rd_spec(unknown="true", diffusion=(2e-3, 4e-3)), params)
    np.testing.assert_allclose(got.mean, want.mean, rtol=1e-15)


# --- normalization -----------------------------------------------------------

def test_norm_from_samples_stats_and_identity_default():
    dt = 0.1
    tt = np.arange(50) * dt
    x2 = 3.0 * np.cos(tt)
    norm = systems.norm_from_samples(2, {1: x2}, dt)
    np.testing.assert_allclose(norm.in_center[1], x2.mean(), rtol=1e-14)
    np.testing.assert_allclose(norm.in_scale[1], x2.std(), rtol=1e-14)
    rates = np.diff(x2) / dt
    np.testing.assert_allclose(norm.out_center[1], rates.mean(), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(norm.out_scale[1], rates.std(), rtol=1e-14)
    # variable 0 unobserved: identity
    assert norm.in_center[0] == 0.0 and norm.in_scale[0] == 1.0
    assert norm.out_center[0] == 0.0 and norm.out_scale[0] == 1.0
    with pytest.raises(SystemError, match="index"):
        systems.norm_from_samples(2, {4: x2}, dt)


def test_zero_network_rates_hit_normalization_constants():
    norm = NormSpec(in_center=[1.0, -2.0], in_scale=[2.0, 3.0],
                    out_center=[5.0, 0.5], out_scale=[4.0, 2.0])
    spec = pendulum_spec(norm=norm)
    params = systems.build_params(spec, seed=0)
    params.nn[:] = 0.0
    out = systems.hamiltonian_rhs(state_of([[0.2], [1.0]], [[0.1], [0.1]]), spec, params)
    # zero network: raw mean 0, raw variance softplus(0) = ln 2; pair 0 is used
    np.testing.assert_allclose(out.mean[0, 0], 5.0, rtol=1e-15)
    np.testing.assert_allclose(out.var[0, 0], 16.0 * np.log(2.0), rtol=1e-15)


# --- rollouts ----------------------------------------------------------------

def test_initial_field_variance_from_sig0():
    spec = rd_spec()
    params = systems.build_params(spec, seed=0)
    params.sig0[:] = np.log(0.04)
    mu0 = np.zeros((2, spec.grid.n_points))
    fld = systems.initial_field(spec, params, mu0)
    np.testing.assert_allclose(fld.var, 0.04, rtol=1e-15)
    fld0 = systems.initial_field(spec, params, mu0, initial_var=0.0)
    np.testing.assert_array_equal(fld0.var, np.zeros_like(mu0))


def test_single_step_with_zero_rhs_repeats_initial_field():
    spec = pendulum_spec(unknown="true")
    params = systems.build_params(spec, seed=0)
    frames = systems.rollout(spec, params, [0.0, 0.0], steps=1, initial_var=0.0)
    assert len(frames) == 2
    np.testing.assert_array_equal(frames[1].mean, frames[0].mean)
    np.testing.assert_array_equal(frames[1].var, frames[0].var)


def test_pendulum_zero_variance_rollout_matches_classical_bitwise():
    spec = pendulum_spec(unknown="true", method="rk4", dt=0.01, n_t=500)
    params = systems.build_params(spec, seed=0)
    frames = systems.rollout(spec, params, [1.2, 0.0], steps=500, initial_var=0.0)
    y = np.array([1.2, 0.0])
    t = 0.0
    for k in range(1, 501):
        y = classical_pendulum_rk4(y, t, 0.01)
        t += 0.01
        np.testing.assert_array_equal(frames[k].mean[:, 0], y)
        np.testing.assert_array_equal(frames[k].var, np.zeros((2, 1)))


def test_rd_zero_variance_rollout_tracks_classical_euler():
    n = 7
    spec = rd_spec(n=n, unknown="true", diffusion=(2.8e-3, 5e-3), dt=1e-3, n_t=20)
    params = systems.build_params(spec, seed=0)
    g = spec.grid
    xx, yy = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    v = np.stack([np.sin(np.pi * xx) * np.cos(np.pi * yy), 0.3 * xx * (1 - yy)])
    frames = systems.rollout(spec, params, v.reshape(2, -1), steps=20, initial_var=0.0)
    cur = v.copy()
    worst = 0.0
    for k in range(1, 21):
        cur = classical_rd_euler(cur, g.dt, g.dx, (2.8e-3, 5e-3))
        diff = np.max(np.abs(frames[k].mean.reshape(2, n, n) - cur))
        worst = max(worst, diff)
    assert worst <= 1e-12 * 20


def test_rd_boundary_variance_zero_on_stepped_frames():
    spec = rd_spec(n=5, unknown="true", diffusion=(1e-3, 1e-3), dt=1e-3, n_t=5)
    params = systems.build_params(spec, seed=0)
    rng = np.random.default_rng(8)
    mu0 = rng.normal(size=(2, spec.grid.n_points))
    frames = systems.rollout(spec, params, mu0, steps=5)
    from momentprop.spatial import boundary_mask
    b = boundary_mask(spec.grid)
    # frame 0 keeps the trainable initial variance everywhere
    assert np.all(frames[0].var[:, b] > 0)
    for f in frames[1:]:
        np.testing.assert_array_equal(f.var[:, b], np.zeros((2, b.sum())))
        assert np.all(f.var >= 0)


def test_pendulum_tape_rollout_matches_plain_bitwise():
    spec = pendulum_spec(dt=0.1, n_t=10)
    params = systems.build_params(spec, seed=4)
    plain = systems.rollout(spec, params, [0.4, 1.0], steps=10)
    tr = systems.rollout_tape(spec, params, [0.4, 1.0], steps=10)
    assert len(tr.means) == 11
    for k in range(11):
        f = tr.frame(k)
        np.testing.assert_array_equal(f.mean, plain[k].mean)
        np.testing.assert_array_equal(f.var, plain[k].var)


def test_rd_tape_rollout_matches_plain():
    spec = rd_spec(n=5, dt=1e-3, n_t=5)
    params = systems.build_params(spec, seed=4)
    rng = np.random.default_rng(11)
    mu0 = 0.5 * rng.normal(size=(2, spec.grid.n_points))
    plain = systems.rollout(spec, params, mu0, steps=5)
    tr = systems.rollout_tape(spec, params, mu0, steps=5)
    for k in range(6):
        f = tr.frame(k)
        np.testing.assert_allclose(f.mean, plain[k].mean, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(f.var, plain[k].var, rtol=1e-12, atol=1e-14)


def test_rollout_abort_reports_step():
    norm = NormSpec(in_center=[0.0, 0.0], in_scale=[1.0, 1.0],
                    out_center=[0.0, 0.0], out_scale=[1e300, 1.0])
    spec = pendulum_spec(norm=norm)
    params = systems.build_params(spec, seed=0)
    with np.errstate(over="ignore"):
        with pytest.raises(SystemError, match="step 1"):
            systems.rollout(spec, params, [0.1, 0.1], steps=3)
        with pytest.raises(SystemError, match="step 1"):
            systems.rollout_tape(spec, params, [0.1, 0.1], steps=3)


def rollout_loss_fn(spec, mu0, steps):
    """Scalar-loss closure over the flat parameters for gradcheck."""

    def f(flat, with_grad=False):
        params = systems.params_for(spec, flat)
        tr = systems.rollout_tape(spec, params, mu0, steps)
        total = None
        for m, v in zip(tr.means[1:], tr.vars_[1:]):
            part = ad.add(ad.vsum(m), ad.vsum(ad.scale(v, 0.5)))
            total = part if total is None else ad.add(total, part)
        if not with_grad:
            return float(total.value)
        grads = ad.backward(total)
        return float(total.value), systems.grads_to_flat(spec, tr.lifted, grads)

    return f


def test_pendulum_rollout_gradcheck_all_segments():
    spec = pendulum_spec(dt=0.1, n_t=10)
    params = systems.build_params(spec, seed=7)
    f = rollout_loss_fn(spec, np.array([0.3, 0.8]), steps=10)
    err = ad.gradcheck(f, params.flat)
    assert err < 1e-6


def test_rd_rollout_gradcheck_all_segments():
    spec = rd_spec(n=3, dt=0.01, n_t=3)
    params = systems.build_params(spec, seed=7)
    rng = np.random.default_rng(13)
    mu0 = 0.3 * rng.normal(size=(2, 9))
    f = rollout_loss_fn(spec, mu0, steps=3)
    # network weights with |grad| ~ 5e-7 of the loss scale sit at the central
    # difference roundoff floor (eps * |f| / h ~ 4e-10 absolute), so the
    # relative metric tops out near 1e-4 for them; the pendulum test above
    # pins the shared tape machinery at 1e-6.
    err = ad.gradcheck(f, params.flat)
    assert err < 5e-4
    # diffusion and initial-variance parameters are well scaled: check sharply
    val, g = f(params.flat, with_grad=True)
    assert np.any(g[:2] != 0)
    assert np.any(g[-2:] != 0)
    h = 1e-5
    for i in (0, 1, len(g) - 2, len(g) - 1):
        up = params.flat.copy()
        dn = params.flat.copy()
        up[i] += h
        dn[i] -= h
        fd = (f(up) - f(dn)) / (2.0 * h)
        assert abs(g[i] - fd) / (abs(fd) + 1e-12) < 1e-6
