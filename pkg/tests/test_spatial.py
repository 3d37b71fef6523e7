"""Spatial operators: the Laplacian variance rule is checked point by point
against a brute-force combine_linear oracle."""
import numpy as np
import pytest

from momentprop.moments import GridSpec, MomentField, MomentError, combine_linear
from momentprop import spatial


def brute_force_laplacian(fld: MomentField, grid: GridSpec) -> MomentField:
    """Oracle: per-point linear combination of single-point fields."""
    n_x, n_y, n_v = grid.n_x, grid.n_y, fld.n_v
    cx, cy = 1.0 / grid.dx ** 2, 1.0 / grid.dy ** 2
    out_m = np.zeros((n_v, grid.n_points))
    out_v = np.zeros((n_v, grid.n_points))
    for j in range(1, n_y - 1):
        for i in range(1, n_x - 1):
            p = j * n_x + i
            # x and y second differences enter as independent combinations,
            # so the center appears once per direction.
            terms = [(cx, p - 1), (cx, p + 1), (-2.0 * cx, p),
                     (cy, p - n_x), (cy, p + n_x), (-2.0 * cy, p)]
            pieces = [MomentField(mean=fld.mean[:, [q]], var=fld.var[:, [q]]) for _, q in terms]
            combo = combine_linear(pieces, [c for c, _ in terms])
            out_m[:, p] = combo.mean[:, 0]
            out_v[:, p] = combo.var[:, 0]
    return MomentField(mean=out_m, var=out_v)


def random_field(grid, seed, n_v=1):
    rng = np.random.default_rng(seed)
    return MomentField(mean=rng.normal(size=(n_v, grid.n_points)),
                       var=rng.uniform(0.0, 1.0, size=(n_v, grid.n_points)))


def grid5(dx=1.0, dy=1.0):
    return GridSpec(n_x=5, n_y=5, n_v=1, dx=dx, dy=dy, dt=0.1, n_t=1)


def test_laplacian_matches_brute_force_oracle():
    for seed in range(10):
        for dx, dy in [(1.0, 1.0), (0.25, 0.25), (0.5, 0.2)]:
            g = grid5(dx, dy)
            f = random_field(g, seed)
            got = spatial.laplacian(f, g)
            want = brute_force_laplacian(f, g)
            np.testing.assert_allclose(got.mean, want.mean, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(got.var, want.var, rtol=1e-12, atol=1e-12)


def test_uniform_mean_has_zero_interior_laplacian():
    g = grid5()
    f = MomentField(mean=np.full((1, 25), 3.7), var=np.zeros((1, 25)))
    out = spatial.laplacian(f, g)
    np.testing.assert_array_equal(out.mean, np.zeros((1, 25)))


def test_uniform_variance_interior_value():
    # dx = dy = 1: var_lap = (s + s + 4s)/1 + (s + s + 4s)/1 = 12 s
    g = grid5()
    s = 0.35
    f = MomentField(mean=np.zeros((1, 25)), var=np.full((1, 25), s))
    out = spatial.laplacian(f, g)
    interior = ~spatial.boundary_mask(g)
    np.testing.assert_allclose(out.var[0, interior], 12.0 * s, rtol=1e-14)
    np.testing.assert_array_equal(out.var[0, ~interior], 0.0)


def test_stencil_matrices_match_direct_computation():
    g = GridSpec(n_x=6, n_y=4, n_v=2, dx=0.2, dy=0.4, dt=0.1, n_t=1)
    f = random_field(g, 3, n_v=2)
    st_mean, st_var = spatial.laplacian_stencils(g)
    direct = spatial.laplacian(f, g)
    np.testing.assert_allclose(f.mean @ st_mean.matrix.T, direct.mean, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(f.var @ st_var.matrix.T, direct.var, rtol=1e-12, atol=1e-12)


def test_laplacian_needs_three_by_three():
    g = GridSpec(n_x=2, n_y=5, n_v=1, dx=1.0, dy=1.0, dt=0.1, n_t=1)
    f = MomentField(mean=np.zeros((1, 10)), var=np.zeros((1, 10)))
    with pytest.raises(MomentError, match="3x3"):
        spatial.laplacian(f, g)


def test_neumann_copies_edges_and_zeroes_boundary_variance():
    g = grid5()
    f = random_field(g, 8)
    out = spatial.apply_neumann(f, g)
    m = out.mean[0].reshape(5, 5)
    src = f.mean[0].reshape(5, 5)
    np.testing.assert_array_equal(m[2, 0], src[2, 1])
    np.testing.assert_array_equal(m[2, 4], src[2, 3])
    np.testing.assert_array_equal(m[0, 2], src[1, 2])
    np.testing.assert_array_equal(m[4, 2], src[3, 2])
    # corners mirror through x then y: diagonal interior neighbor
    assert m[0, 0] == src[1, 1]
    assert m[4, 4] == src[3, 3]
    v = out.var[0].reshape(5, 5)
    assert np.all(v[0, :] == 0) and np.all(v[-1, :] == 0)
    assert np.all(v[:, 0] == 0) and np.all(v[:, -1] == 0)
    np.testing.assert_array_equal(v[1:-1, 1:-1], f.var[0].reshape(5, 5)[1:-1, 1:-1])


def test_neumann_is_idempotent():
    g = grid5()
    f = random_field(g, 21)
    once = spatial.apply_neumann(f, g)
    twice = spatial.apply_neumann(once, g)
    np.testing.assert_array_equal(once.mean, twice.mean)
    np.testing.assert_array_equal(once.var, twice.var)


def test_neumann_stencils_match_direct_op():
    g = GridSpec(n_x=4, n_y=5, n_v=2, dx=1.0, dy=1.0, dt=0.1, n_t=1)
    f = random_field(g, 13, n_v=2)
    mean_st, var_st = spatial.neumann_stencils(g)
    direct = spatial.apply_neumann(f, g)
    np.testing.assert_allclose(f.mean @ mean_st.matrix.T, direct.mean, rtol=1e-14)
    np.testing.assert_allclose(f.var @ var_st.matrix.T, direct.var, rtol=1e-14)


def test_boundary_mask_shape_and_count():
    g = grid5()
    mask = spatial.boundary_mask(g)
    assert mask.shape == (25,)
    assert mask.sum() == 16  # 5x5 has 16 boundary points
