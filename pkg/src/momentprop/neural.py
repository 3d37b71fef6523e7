"""Moment-propagating perceptrons for unknown physics terms.

The network maps per-point Gaussian moments to Gaussian moments: the input
row is the means followed by log(var + 1e-12) (keeps the variance channels in
the same magnitude regime as the means), hidden layers are tanh, and a linear
output layer stacks K mean channels and K raw variance channels, the latter
passed through softplus so output variances stay strictly positive.

Parameters travel as one flat float64 segment laid out layer by layer
(weights row-major, then bias). ``lift_params`` mirrors that layout onto a
tape so rollouts differentiate through the network with matmul nodes; biases
are lifted as (1, width) rows and tiled against a ones column.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import autodiff as ad

VAR_EPS = 1e-12


class NeuralError(Exception):
    pass


@dataclass(frozen=True)
class MomentMlpSpec:
    """Network shape: moment pairs in, tanh hidden widths, moment pairs out."""

    n_in_vars: int
    n_out_vars: int
    hidden: Tuple[int, ...]

    def __post_init__(self):
        if self.n_in_vars < 1 or self.n_out_vars < 1:
            raise NeuralError(
                f"need at least one input and output pair, got {self.n_in_vars}/{self.n_out_vars}")
        widths = tuple(int(w) for w in self.hidden)
        if len(widths) == 0 or any(w < 1 for w in widths):
            raise NeuralError(f"hidden widths must be positive, got {self.hidden!r}")
        object.__setattr__(self, "hidden", widths)

    @property
    def n_in(self) -> int:
        return 2 * self.n_in_vars

    @property
    def n_out(self) -> int:
        return 2 * self.n_out_vars

    def layer_shapes(self) -> List[Tuple[int, int]]:
        dims = (self.n_in,) + self.hidden + (self.n_out,)
        return list(zip(dims[:-1], dims[1:]))

    @classmethod
    def ode_preset(cls) -> "MomentMlpSpec":
        return cls(n_in_vars=2, n_out_vars=2, hidden=(8, 8))

    @classmethod
    def pde_preset(cls) -> "MomentMlpSpec":
        return cls(n_in_vars=2, n_out_vars=2, hidden=(32, 32))


def param_count(spec: MomentMlpSpec) -> int:
    return sum(fi * fo + fo for fi, fo in spec.layer_shapes())


def unpack(spec: MomentMlpSpec, theta: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Split a flat segment into per-layer (weights, bias) arrays."""
    theta = np.asarray(theta, dtype=np.float64)
    n = param_count(spec)
    if theta.shape != (n,):
        raise NeuralError(f"expected a flat segment of {n} parameters, got shape {theta.shape}")
    pairs = []
    k = 0
    for fi, fo in spec.layer_shapes():
        w = theta[k:k + fi * fo].reshape(fi, fo)
        k += fi * fo
        b = theta[k:k + fo]
        k += fo
        pairs.append((w, b))
    return pairs


def init_params(spec: MomentMlpSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases, reproducible per seed."""
    rng = np.random.default_rng(seed)
    parts = []
    for fi, fo in spec.layer_shapes():
        bound = np.sqrt(6.0 / (fi + fo))
        parts.append(rng.uniform(-bound, bound, size=fi * fo))
        parts.append(np.zeros(fo))
    return np.concatenate(parts)


def _check_inputs(spec: MomentMlpSpec, mu: np.ndarray, var: np.ndarray):
    if mu.shape != var.shape:
        raise NeuralError(f"mean shape {mu.shape} != variance shape {var.shape}")
    if mu.shape[-1] != spec.n_in_vars:
        raise NeuralError(f"expected {spec.n_in_vars} input pairs, got {mu.shape[-1]}")
    if np.any(var < 0):
        raise NeuralError("negative input variance")


def mlp_forward(spec: MomentMlpSpec, theta: np.ndarray, mu, var):
    """Forward pass on (L,) vectors or (P, L) batches of moment pairs."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    single = mu.ndim == 1
    m = np.atleast_2d(mu)
    v = np.atleast_2d(var)
    _check_inputs(spec, m, v)
    x = np.concatenate([m, np.log(v + VAR_EPS)], axis=1)
    pairs = unpack(spec, theta)
    for w, b in pairs[:-1]:
        x = np.tanh(x @ w + b)
    w, b = pairs[-1]
    out = x @ w + b
    k = spec.n_out_vars
    mu_out = out[:, :k]
    var_out = np.logaddexp(0.0, out[:, k:])
    if single:
        return mu_out[0], var_out[0]
    return mu_out, var_out


def lift_params(spec: MomentMlpSpec, theta: np.ndarray, tape: ad.Tape,
                needs_grad: bool = True) -> List[Tuple[ad.Var, ad.Var]]:
    """Lift the flat segment onto a tape as per-layer (W, bias-row) leaves."""
    return [(tape.leaf(w, needs_grad=needs_grad), tape.leaf(b[None, :], needs_grad=needs_grad))
            for w, b in unpack(spec, theta)]


def grads_to_segment(pairs: Sequence[Tuple[ad.Var, ad.Var]], grads: ad.Grads) -> np.ndarray:
    """Flatten per-layer leaf gradients back into the segment layout."""
    parts = []
    for w, b in pairs:
        parts.append(grads.wrt(w).ravel())
        parts.append(grads.wrt(b).ravel())
    return np.concatenate(parts)


def mlp_forward_tape(spec: MomentMlpSpec, pairs: Sequence[Tuple[ad.Var, ad.Var]],
                     mean_cols: ad.Var, var_cols: ad.Var) -> Tuple[ad.Var, ad.Var]:
    """Tape forward over (P, L) moment columns; returns (P, K) mean and variance."""
    want = len(spec.layer_shapes())
    if len(pairs) != want:
        raise NeuralError(f"expected {want} lifted layers, got {len(pairs)}")
    if mean_cols.shape != var_cols.shape or mean_cols.shape[1] != spec.n_in_vars:
        raise NeuralError(
            f"expected (P, {spec.n_in_vars}) moment columns, got {mean_cols.shape}/{var_cols.shape}")
    tape = mean_cols.tape
    n_pts = mean_cols.shape[0]
    eps = tape.const_like(var_cols.shape, VAR_EPS)
    x = ad.concat([mean_cols, ad.log(ad.add(var_cols, eps))], axis=1)
    ones = tape.ones((n_pts, 1))
    for i, (w, b) in enumerate(pairs):
        x = ad.add(ad.matmul(x, w), ad.matmul(ones, b))
        if i < want - 1:
            x = ad.tanh(x)
    k = spec.n_out_vars
    return x[:, :k], ad.softplus(x[:, k:])
