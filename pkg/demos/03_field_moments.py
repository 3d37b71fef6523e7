"""Moment fields under the discrete Laplacian and Neumann edges.

A field here is a mean and a variance per grid point. Applying a linear
stencil moves the mean through the coefficients and the variance through
their squares; the demo shows both, plus the mirror boundary rule that
keeps edges flat and pins their variance.
"""
import numpy as np

from momentprop import spatial
from momentprop.moments import GridSpec, MomentField


def main():
    grid = GridSpec.unit_square(5, n_v=1, dt=0.01, n_t=2)
    rng = np.random.default_rng(42)

    # uniform mean: every interior row of the stencil sums to zero
    flat = MomentField(mean=np.full((1, 25), 3.0), var=np.full((1, 25), 0.5))
    lap = spatial.laplacian(flat, grid)
    print("uniform field, laplacian mean (interior):",
          lap.mean.reshape(5, 5)[1:-1, 1:-1].ravel())
    # each direction contributes (1 + 1 + 4) coefficient squares of 1/dx^2
    h4 = grid.dx ** 4
    print("uniform variance 0.5 -> interior output:",
          lap.var.reshape(5, 5)[2, 2], "expected:", 12 * 0.5 / h4)

    # random field: the variance never goes negative and boundary rows stay 0
    fld = MomentField(mean=rng.normal(size=(1, 25)),
                      var=rng.random((1, 25)) + 0.1)
    lap = spatial.laplacian(fld, grid)
    print("\nrandom field: min output variance (interior):",
          lap.var.reshape(5, 5)[1:-1, 1:-1].min())
    print("boundary rows are zero:", np.all(lap.var.reshape(5, 5)[0] == 0.0))

    # Neumann step: edge means copy their interior neighbor, edge variance 0
    fixed = spatial.apply_neumann(fld, grid)
    m = fixed.mean.reshape(5, 5)
    v = fixed.var.reshape(5, 5)
    print("\nafter the boundary rule:")
    print("  west edge equals its neighbor:",
          np.allclose(m[1:-1, 0], m[1:-1, 1]))
    print("  boundary variance:", v[0].max(), v[-1].max(),
          v[:, 0].max(), v[:, -1].max())


if __name__ == "__main__":
    main()
