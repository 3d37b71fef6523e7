"""Moment fields and exact linear rules, cross-checked against Monte Carlo."""
import numpy as np
import pytest

from momentprop.moments import GridSpec, MomentField, MomentError, affine_propagate, combine_linear


def mc_affine_moments(K, b, mu, var, n=1_000_000, seed=7):
    """Oracle: empirical moments of K X + b for X ~ N(mu, diag(var))."""
    rng = np.random.default_rng(seed)
    X = rng.normal(mu, np.sqrt(var), size=(n, mu.size))
    Y = X @ K.T + b
    return Y.mean(axis=0), Y.var(axis=0), Y.std(axis=0) / np.sqrt(n)


def field(mu, var):
    return MomentField(mean=np.atleast_2d(mu), var=np.atleast_2d(var))


def test_identity_affine_is_exact_copy():
    f = field([1.0, -2.0, 0.5], [0.1, 0.2, 0.0])
    out = affine_propagate(f, np.eye(3))
    np.testing.assert_array_equal(out.mean, f.mean)
    np.testing.assert_array_equal(out.var, f.var)


def test_scale_and_offset_example():
    # K = 2 I, b = 1 on (mu=1, var=0.25): mean 2*1+1 = 3, var 4*0.25 = 1
    f = field([1.0], [0.25])
    out = affine_propagate(f, 2.0 * np.eye(1), b=1.0)
    assert out.mean[0, 0] == 3.0
    assert out.var[0, 0] == 1.0


def test_affine_against_monte_carlo():
    rng = np.random.default_rng(42)
    K = rng.normal(size=(4, 4))
    b = rng.normal(size=4)
    mu = rng.normal(size=4)
    var = rng.uniform(0.1, 1.0, size=4)
    out = affine_propagate(field(mu, var), K, b=b)
    mc_mean, mc_var, mc_se = mc_affine_moments(K, b, mu, var)
    assert np.all(np.abs(out.mean[0] - mc_mean) <= 3.0 * mc_se)
    np.testing.assert_allclose(out.var[0], mc_var, rtol=0.02)


def test_zero_variance_stays_zero_through_affine():
    rng = np.random.default_rng(3)
    K = rng.normal(size=(5, 5))
    out = affine_propagate(field(rng.normal(size=5), np.zeros(5)), K, b=2.0)
    np.testing.assert_array_equal(out.var, np.zeros((1, 5)))


def test_combine_linear_example():
    # 0.5 * (2, var 4) + 0.5 * (4, var 4) -> mean 3, var 2
    a = field([2.0], [4.0])
    b = field([4.0], [4.0])
    out = combine_linear([a, b], [0.5, 0.5])
    assert out.mean[0, 0] == 3.0
    assert out.var[0, 0] == 2.0


def test_combining_field_with_itself_never_cancels_variance():
    f = field([1.5, -0.5], [0.3, 0.7])
    out = combine_linear([f, f], [1.0, -1.0])
    np.testing.assert_array_equal(out.mean, np.zeros((1, 2)))
    np.testing.assert_allclose(out.var[0], [0.6, 1.4], rtol=1e-15)


def test_combine_against_monte_carlo():
    rng = np.random.default_rng(11)
    mus = [rng.normal(size=3) for _ in range(3)]
    vars_ = [rng.uniform(0.2, 0.8, size=3) for _ in range(3)]
    coeffs = [0.7, -1.3, 0.4]
    out = combine_linear([field(m, v) for m, v in zip(mus, vars_)], coeffs)

    n = 1_000_000
    total = np.zeros((n, 3))
    for k, (m, v) in enumerate(zip(mus, vars_)):
        total += coeffs[k] * np.random.default_rng(100 + k).normal(m, np.sqrt(v), size=(n, 3))
    se = total.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(out.mean[0] - total.mean(axis=0)) <= 3.0 * se)
    np.testing.assert_allclose(out.var[0], total.var(axis=0), rtol=0.02)


def test_variances_never_negative_under_random_combines():
    rng = np.random.default_rng(5)
    for _ in range(100):
        fields = [field(rng.normal(size=4), rng.uniform(0, 1, size=4)) for _ in range(3)]
        out = combine_linear(fields, rng.normal(size=3))
        assert np.all(out.var >= 0)


def test_negative_variance_rejected():
    with pytest.raises(MomentError, match="negative variance"):
        field([0.0], [-1e-3])


def test_moment_field_is_immutable():
    f = field([1.0], [1.0])
    with pytest.raises(ValueError):
        f.mean[0, 0] = 2.0


def test_mismatched_field_shapes_rejected():
    with pytest.raises(MomentError, match="differ"):
        MomentField(mean=np.zeros((2, 3)), var=np.zeros((2, 4)))
    with pytest.raises(MomentError, match="differ"):
        combine_linear([field([1.0], [1.0]), field([1.0, 2.0], [1.0, 1.0])], [1.0, 1.0])


def test_operator_size_mismatch_rejected():
    with pytest.raises(MomentError, match="points"):
        affine_propagate(field([1.0, 2.0], [1.0, 1.0]), np.eye(3))


def test_grid_spec_validation():
    with pytest.raises(MomentError, match="positive"):
        GridSpec(n_x=0, n_y=1, n_v=1, dx=1.0, dy=1.0, dt=0.1, n_t=10)
    with pytest.raises(MomentError, match="spacings"):
        GridSpec(n_x=2, n_y=2, n_v=1, dx=-1.0, dy=1.0, dt=0.1, n_t=10)
    g = GridSpec.unit_square(11, n_v=2, dt=0.01, n_t=100)
    assert g.dx == pytest.approx(0.1)
    assert g.n_points == 121
    ode = GridSpec.ode(n_v=2, dt=0.1, n_t=200)
    assert ode.n_points == 1
