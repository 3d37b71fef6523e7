"""Unscented transform for diagonal-Gaussian inputs.

Sigma points follow the scaled formulation. For dimension L with scaling
``lambda = alpha^2 (L + kappa) - L``:

    X_0 = mu,   X_i = mu + sqrt((L + lambda) var_i) e_i,
                X_{L+i} = mu - sqrt((L + lambda) var_i) e_i

    w_mean_0 = lambda / (L + lambda)
    w_cov_0  = lambda / (L + lambda) + (1 - alpha^2 + beta)
    w_i      = 1 / (2 (L + lambda))      (both weights, i >= 1)

The covariance is diagonal, so the matrix square root reduces to elementwise
square roots. Defaults alpha=1, kappa=0, beta=2 give lambda=0: the center
point drops out of the mean but keeps weight 2 in the variance.

Two evaluation paths share these weights: a plain numpy ``ut_propagate`` for
vectorized functions, and ``ut_propagate_tape`` that builds the same
computation from tape ops so rollouts stay differentiable end to end.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


class UtError(Exception):
    pass


@dataclass(frozen=True)
class UtConfig:
    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0

    def lam(self, L: int) -> float:
        return self.alpha * self.alpha * (L + self.kappa) - L


DEFAULT_UT = UtConfig()


def ut_weights(L: int, cfg: UtConfig = DEFAULT_UT):
    """Mean and covariance weights of the 2L+1 sigma points."""
    if L < 1:
        raise UtError(f"dimension must be >= 1, got {L}")
    lam = cfg.lam(L)
    denom = L + lam
    if denom <= 0:
        raise UtError(f"L + lambda must be positive, got {denom} for L={L}, cfg={cfg}")
    w_mean = np.full(2 * L + 1, 1.0 / (2.0 * denom))
    w_cov = w_mean.copy()
    w_mean[0] = lam / denom
    w_cov[0] = lam / denom + (1.0 - cfg.alpha * cfg.alpha + cfg.beta)
    return w_mean, w_cov, lam


@dataclass(frozen=True)
class SigmaSet:
    points: np.ndarray  # (2L+1, L)
    w_mean: np.ndarray
    w_cov: np.ndarray


def sigma_points(mu, var, cfg: UtConfig = DEFAULT_UT) -> SigmaSet:
    """Sigma points of a diagonal Gaussian (mu, var), both shape (L,)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    var = np.atleast_1d(np.asarray(var, dtype=np.float64))
    if mu.shape != var.shape or mu.ndim != 1:
        raise UtError(f"mu and var must be matching vectors, got {mu.shape} and {var.shape}")
    if np.any(var < 0):
        raise UtError(f"negative input variance: {var}")
    L = mu.size
    w_mean, w_cov, lam = ut_weights(L, cfg)
    offsets = np.sqrt((L + lam) * var)
    pts = np.tile(mu, (2 * L + 1, 1))
    for i in range(L):
        pts[1 + i, i] += offsets[i]
        pts[1 + L + i, i] -= offsets[i]
    return SigmaSet(points=pts, w_mean=w_mean, w_cov=w_cov)


def ut_propagate(f: Callable, mu, var, cfg: UtConfig = DEFAULT_UT):
    """Propagate (mu, var) through f by the unscented transform.

    ``f`` maps an (n_pts, L) array of sigma points to (n_pts, K) outputs.
    Returns the output mean and diagonal variance, each shape (K,).
    """
    ss = sigma_points(mu, var, cfg)
    Y = np.asarray(f(ss.points), dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != ss.points.shape[0]:
        raise UtError(f"f returned {Y.shape[0]} rows for {ss.points.shape[0]} sigma points")
    bad = ~np.isfinite(Y)
    if np.any(bad):
        raise UtError(f"non-finite f output at sigma point {int(np.argwhere(bad)[0][0])}")
    mean = ss.w_mean @ Y
    dev = Y - mean
    var_out = ss.w_cov @ (dev * dev)
    return mean, var_out


def ut_propagate_batch(f: Callable, mean_cols, var_cols, cfg: UtConfig = DEFAULT_UT):
    """Pointwise UT over a batch: one diagonal Gaussian per row of (P, L).

    ``f`` maps the ((2L+1) P, L) stack of sigma states to ((2L+1) P, K).
    Returns (P, K) mean and variance arrays. The block layout and weighting
    order mirror ``ut_propagate_tape`` exactly so plain and tape rollouts
    agree bit for bit.
    """
    mean_cols = np.asarray(mean_cols, dtype=np.float64)
    var_cols = np.asarray(var_cols, dtype=np.float64)
    if mean_cols.ndim != 2 or mean_cols.shape != var_cols.shape:
        raise UtError(f"mean/var column shapes differ: {mean_cols.shape} vs {var_cols.shape}")
    if np.any(var_cols < 0):
        raise UtError("negative input variance")
    P, L = mean_cols.shape
    w_mean, w_cov, lam = ut_weights(L, cfg)

    scaled = var_cols if (L + lam) == 1.0 else (L + lam) * var_cols
    offsets = np.sqrt(np.maximum(scaled, 0.0))

    blocks = [mean_cols]
    for sign in (1.0, -1.0):
        for i in range(L):
            off = np.zeros((P, L))
            off[:, i] = offsets[:, i]
            blocks.append(mean_cols + off if sign > 0 else mean_cols - off)
    stacked = np.concatenate(blocks, axis=0)

    Y = np.asarray(f(stacked), dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != (2 * L + 1) * P:
        raise UtError(f"f returned shape {Y.shape}, expected ({(2 * L + 1) * P}, K)")
    bad = ~np.isfinite(Y)
    if np.any(bad):
        raise UtError(f"non-finite f output at sigma point {int(np.argwhere(bad)[0][0] // P)}")

    ys = [Y[j * P:(j + 1) * P, :] for j in range(2 * L + 1)]
    mean_out = None
    for w, y in zip(w_mean, ys):
        if w == 0.0:
            continue
        term = y * w
        mean_out = term if mean_out is None else mean_out + term
    var_out = None
    for w, y in zip(w_cov, ys):
        if w == 0.0:
            continue
        dev = y - mean_out
        term = (dev * dev) * w
        var_out = term if var_out is None else var_out + term
    return mean_out, var_out


def ut_propagate_tape(f: Callable, mean_cols: ad.Var, var_cols: ad.Var,
                      cfg: UtConfig = DEFAULT_UT):
    """Tape-op version of ``ut_propagate`` applied pointwise over a grid.

    ``mean_cols`` and ``var_cols`` are (P, L) Vars: one diagonal Gaussian per
    grid point. ``f`` maps a (n P, L) Var of stacked sigma states to an
    (n P, K) Var using tape ops only. Returns (P, K) mean and variance Vars,
    differentiable with respect to the inputs and anything inside f.
    """
    P, L = mean_cols.shape
    if var_cols.shape != (P, L):
        raise UtError(f"mean/var column shapes differ: {mean_cols.shape} vs {var_cols.shape}")
    w_mean, w_cov, lam = ut_weights(L, cfg)
    tape = mean_cols.tape

    scaled = var_cols if (L + lam) == 1.0 else ad.scale(var_cols, L + lam)
    offsets = ad.sqrt(scaled)

    # Block order matches the weight order: center, all +e_i, all -e_i.
    offs = []
    for i in range(L):
        mask = np.zeros((P, L))
        mask[:, i] = 1.0
        offs.append(ad.mul(offsets, tape.const(mask)))
    blocks = [mean_cols] + [mean_cols + o for o in offs] + [mean_cols - o for o in offs]
    stacked = ad.concat(blocks, axis=0)

    Y = f(stacked)
    yv = Y.value
    if yv.ndim != 2 or yv.shape[0] != (2 * L + 1) * P:
        raise UtError(f"f returned shape {yv.shape}, expected ({(2 * L + 1) * P}, K)")
    bad = ~np.isfinite(yv)
    if np.any(bad):
        raise UtError(f"non-finite f output at sigma point {int(np.argwhere(bad)[0][0] // P)}")

    ys = [Y[j * P:(j + 1) * P, :] for j in range(2 * L + 1)]

    mean_out = None
    for w, y in zip(w_mean, ys):
        if w == 0.0:
            continue
        term = ad.scale(y, w)
        mean_out = term if mean_out is None else mean_out + term

    var_out = None
    for w, y in zip(w_cov, ys):
        if w == 0.0:
            continue
        dev = y - mean_out
        term = ad.scale(ad.square(dev), w)
        var_out = term if var_out is None else var_out + term
    return mean_out, var_out
