"""Observation likelihoods, SGD/SWAG training, and ensemble prediction.

The loss is the masked Gaussian negative log likelihood of observed entries
against rolled-out moments. Training runs an adaptive-moment exploration
phase followed by constant-rate plain SGD, collecting running first/second
parameter moments and a low-rank deviation matrix over the tail iterates.
Predictions average rollouts over posterior draws from every ensemble
member: the mean of member variances is the aleatoric part, the spread of
member means the epistemic part, and their sum the total variance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import systems
from .moments import GridSpec, MomentField
from .systems import ParamVector, SystemError, SystemSpec


class BayesError(Exception):
    pass


# --- observations ------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Sparse observation table over a rollout grid.

    Entries are (frame, variable, point, value) rows. A (frame, variable,
    point) triple may appear at most once, so the dense mask per frame is
    well defined and the loss is invariant to row order.
    """

    grid: GridSpec
    frames: np.ndarray
    var_idx: np.ndarray
    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        frames = np.ascontiguousarray(np.asarray(self.frames, dtype=np.int64))
        var_idx = np.ascontiguousarray(np.asarray(self.var_idx, dtype=np.int64))
        points = np.ascontiguousarray(np.asarray(self.points, dtype=np.int64))
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        n = frames.shape[0]
        for name, arr in (("frames", frames), ("var_idx", var_idx),
                          ("points", points), ("values", values)):
            if arr.ndim != 1 or arr.shape[0] != n:
                raise BayesError(f"dataset column {name} must be 1-d with {n} rows")
        if n:
            g = self.grid
            if frames.min() < 0 or frames.max() >= g.n_t:
                raise BayesError(f"frame index outside [0, {g.n_t})")
            if var_idx.min() < 0 or var_idx.max() >= g.n_v:
                raise BayesError(f"variable index outside [0, {g.n_v})")
            if points.min() < 0 or points.max() >= g.n_points:
                raise BayesError(f"point index outside [0, {g.n_points})")
            if not np.all(np.isfinite(values)):
                raise BayesError("non-finite observation value")
            key = (frames * g.n_v + var_idx) * g.n_points + points
            if np.unique(key).shape[0] != n:
                raise BayesError("duplicate (frame, variable, point) entry")
        for arr in (frames, var_idx, points, values):
            arr.flags.writeable = False
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "var_idx", var_idx)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "values", values)

    @property
    def n_entries(self) -> int:
        return int(self.frames.shape[0])

    @property
    def max_frame(self) -> int:
        if self.n_entries == 0:
            raise BayesError("empty dataset has no frames")
        return int(self.frames.max())

    def observed_frames(self) -> np.ndarray:
        return np.unique(self.frames)

    def dense(self, frame: int) -> Tuple[np.ndarray, np.ndarray]:
        """0/1 mask and value arrays of shape (n_v, n_points) for one frame."""
        g = self.grid
        mask = np.zeros((g.n_v, g.n_points))
        vals = np.zeros((g.n_v, g.n_points))
        rows = self.frames == frame
        mask[self.var_idx[rows], self.points[rows]] = 1.0
        vals[self.var_idx[rows], self.points[rows]] = self.values[rows]
        return mask, vals

    @classmethod
    def from_dense(cls, grid: GridSpec, frame_indices: Sequence[int],
                   values: np.ndarray, mask: np.ndarray) -> "Dataset":
        """Build the table from per-frame dense arrays.

        values and mask have shape (len(frame_indices), n_v, n_points);
        entries where mask is falsy are dropped.
        """
        frame_indices = np.asarray(frame_indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        want = (frame_indices.shape[0], grid.n_v, grid.n_points)
        if values.shape != want or mask.shape != want:
            raise BayesError(f"dense arrays must have shape {want}")
        fi, vi, pi = np.nonzero(mask)
        return cls(grid=grid, frames=frame_indices[fi], var_idx=vi,
                   points=pi, values=values[fi, vi, pi])


# --- negative log likelihood -------------------------------------------------

def nll_loss(frames_pred: Sequence[MomentField], data: Dataset) -> float:
    """Mean over observed entries of 0.5 log s2 + (v - mu)^2 / (2 s2).

    Variances are floored at 1e-12 inside the log; the reciprocal is taken
    as exp(-log s2) so the floor bounds both terms.
    """
    if data.n_entries == 0:
        raise BayesError("empty dataset")
    if data.max_frame >= len(frames_pred):
        raise BayesError(f"observed frame {data.max_frame} outside rollout "
                         f"of {len(frames_pred)} frames")
    total = 0.0
    for k in data.observed_frames():
        mask, obs = data.dense(int(k))
        f = frames_pred[int(k)]
        lv = np.log(np.maximum(f.var, ad.FLOOR))
        r = obs - f.mean
        term = 0.5 * lv + 0.5 * (r * r) * np.exp(-lv)
        total += float(np.sum(term * mask))
    return total / data.n_entries


def nll_loss_tape(tr: systems.TapeRollout, data: Dataset) -> ad.Var:
    """Differentiable twin of nll_loss over a taped rollout."""
    if data.n_entries == 0:
        raise BayesError("empty dataset")
    if data.max_frame >= len(tr.means):
        raise BayesError(f"observed frame {data.max_frame} outside rollout "
                         f"of {len(tr.means)} frames")
    tape = tr.tape
    total = None
    for k in data.observed_frames():
        mask, obs = data.dense(int(k))
        m_c = tape.const(np.ascontiguousarray(mask.T))
        o_c = tape.const(np.ascontiguousarray(obs.T))
        mean, var = tr.means[int(k)], tr.vars_[int(k)]
        lv = ad.log(var)
        r = ad.sub(o_c, mean)
        quad = ad.mul(ad.square(r), ad.exp(ad.neg(lv)))
        term = ad.add(ad.scale(lv, 0.5), ad.scale(quad, 0.5))
        part = ad.vsum(ad.mul(term, m_c))
        total = part if total is None else ad.add(total, part)
    return ad.scale(total, 1.0 / data.n_entries)


def nll_objective(spec: SystemSpec, data: Dataset, mu0: np.ndarray,
                  steps: Optional[int] = None) -> Callable:
    """Closure over the flat parameters, in the gradcheck calling convention."""
    n_steps = data.max_frame if steps is None else int(steps)

    def f(flat: np.ndarray, with_grad: bool = False):
        params = systems.params_for(spec, flat)
        tr = systems.rollout_tape(spec, params, mu0, n_steps)
        loss = nll_loss_tape(tr, data)
        if not with_grad:
            return float(loss.value)
        grads = ad.backward(loss)
        return float(loss.value), systems.grads_to_flat(spec, tr.lifted, grads)

    return f


# --- optimizers --------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


# --- SWAG statistics ---------------------------------------------------------

@dataclass
class SwagStats:
    """Running moments and last-r deviation columns of an SGD trajectory."""

    mean: np.ndarray
    second: np.ndarray
    dev_cols: List[np.ndarray]
    rank: int
    count: int
    interval: int

    @classmethod
    def fresh(cls, n_params: int, rank: int, interval: int) -> "SwagStats":
        if rank < 2:
            raise BayesError("rank must be at least 2")
        if interval < 1:
            raise BayesError("interval must be at least 1")
        return cls(mean=np.zeros(n_params), second=np.zeros(n_params),
                   dev_cols=[], rank=int(rank), count=0, interval=int(interval))

    def update(self, theta: np.ndarray) -> None:
        n = self.count
        self.mean = (n * self.mean + theta) / (n + 1)
        self.second = (n * self.second + theta * theta) / (n + 1)
        self.count = n + 1
        self.dev_cols.append(theta - self.mean)
        if len(self.dev_cols) > self.rank:
            del self.dev_cols[0]

    @property
    def sigma_diag(self) -> np.ndarray:
        return np.maximum(self.second - self.mean * self.mean, 0.0)

    @property
    def dhat(self) -> np.ndarray:
        if not self.dev_cols:
            return np.zeros((self.mean.shape[0], 0))
        return np.stack(self.dev_cols, axis=1)

    def marginal_var(self) -> np.ndarray:
        """Per-parameter variance 0.5 (Sigma_diag + diag(D Dt) / (r - 1))."""
        d = self.dhat
        k = d.shape[1]
        low = (d * d).sum(axis=1) / (k - 1) if k >= 2 else np.zeros_like(self.mean)
        return 0.5 * (self.sigma_diag + low)


def swag_sample(stats: SwagStats, seed, size: Optional[int] = None) -> np.ndarray:
    """Posterior draw(s) theta_SWA + sqrt(Sigma_diag/2) z1 + D z2 / sqrt(2(r-1)).

    Returns one flat vector, or a (size, n_params) stack when size is given.
    """
    if stats.rank < 2:
        raise BayesError("rank must be at least 2 to sample")
    if stats.count < stats.rank:
        raise BayesError(f"only {stats.count} trajectory samples collected, "
                         f"need at least rank {stats.rank}")
    d = stats.dhat
    r = d.shape[1]
    rng = np.random.default_rng(seed)
    m = 1 if size is None else int(size)
    z1 = rng.standard_normal((m, stats.mean.shape[0]))
    z2 = rng.standard_normal((m, r))
    draws = (stats.mean[None, :]
             + z1 * np.sqrt(0.5 * stats.sigma_diag)[None, :]
             + (z2 @ d.T) / np.sqrt(2.0 * (r - 1)))
    return draws[0] if size is None else draws


# --- training ----------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleConfig:
    epochs: int
    n_members: int = 4
    draws: int = 32
    swag_start: float = 0.75
    rank: int = 20
    interval: int = 1
    lr_explore: float = 1e-2
    lr_swag: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise BayesError("epochs must be at least 1")
        if self.n_members < 2:
            raise BayesError("ensemble needs at least 2 members")
        if self.draws < 1:
            raise BayesError("draws must be at least 1")
        if not 0.0 <= self.swag_start < 1.0:
            raise BayesError("swag_start must lie in [0, 1)")
        if self.rank < 2:
            raise BayesError("rank must be at least 2")
        if self.interval < 1:
            raise BayesError("interval must be at least 1")
        n_collect = self.epochs - self.swag_start_epoch
        if (n_collect + self.interval - 1) // self.interval < self.rank:
            raise BayesError(f"SWAG phase of {n_collect} epochs at interval "
                             f"{self.interval} cannot fill rank {self.rank}")

    @property
    def swag_start_epoch(self) -> int:
        return int(round(self.swag_start * self.epochs))


@dataclass
class TrainResult:
    params: ParamVector
    swag: SwagStats
    losses: np.ndarray
    lam_trace: np.ndarray
    # per-epoch marginal variance of the coefficient segment, NaN until the
    # averaging phase has collected at least two iterates
    lam_var_trace: np.ndarray


def train_member(spec: SystemSpec, data: Dataset, cfg: EnsembleConfig,
                 seed, mu0: np.ndarray) -> TrainResult:
    """One ensemble member: adaptive-moment exploration, then SGD + SWAG."""
    if data.n_entries == 0:
        raise BayesError("empty dataset: nothing to fit")
    if data.grid != spec.grid:
        raise BayesError("dataset grid does not match the system grid")
    if data.max_frame < 1:
        raise BayesError("dataset must observe at least one stepped frame")
    objective = nll_objective(spec, data, mu0)
    params = systems.build_params(spec, seed)
    theta = params.flat.copy()
    start = cfg.swag_start_epoch
    swag = SwagStats.fresh(theta.shape[0], cfg.rank, cfg.interval)
    adam = AdamState.zeros(theta.shape[0])
    losses = np.zeros(cfg.epochs)
    n_lam = spec.n_lam
    lam_trace = np.zeros((cfg.epochs, n_lam))
    lam_var_trace = np.full((cfg.epochs, n_lam), np.nan)
    for epoch in range(cfg.epochs):
        try:
            loss, grad = objective(theta, with_grad=True)
        except SystemError as e:
            raise BayesError(f"member aborted at epoch {epoch}: {e}") from e
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise BayesError(f"member aborted at epoch {epoch}: non-finite loss")
        losses[epoch] = loss
        lam_trace[epoch] = theta[:n_lam]
        if epoch < start:
            theta = adam_step(theta, grad, adam, cfg.lr_explore)
        else:
            theta = theta - cfg.lr_swag * grad
            if (epoch - start) % cfg.interval == 0:
                swag.update(theta)
        if n_lam and swag.count >= 2:
            lam_var_trace[epoch] = swag.marginal_var()[:n_lam]
    return TrainResult(params=systems.params_for(spec, theta), swag=swag,
                       losses=losses, lam_trace=lam_trace,
                       lam_var_trace=lam_var_trace)


def member_seeds(cfg: EnsembleConfig) -> list:
    """Independent per-member seed sequences derived from the config seed."""
    return np.random.SeedSequence(cfg.seed).spawn(cfg.n_members)


# --- prediction --------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    """Per-frame moments aggregated over posterior draws.

    Arrays have shape (n_frames, n_v, n_points). total is aleatoric +
    epistemic by construction.
    """

    mean: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray
    draws_used: int
    draws_failed: int


def _aggregate(means: np.ndarray, vars_: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Combine per-draw moments: (M, ...) stacks -> (mean, aleat, epist, total)."""
    e = means.mean(axis=0)
    aleat = vars_.mean(axis=0)
    dev = means - e[None]
    epist = (dev * dev).mean(axis=0)
    return e, aleat, epist, aleat + epist


def bma_predict(members: Sequence[SwagStats], spec: SystemSpec, mu0: np.ndarray,
                steps: int, draws: int, seed) -> Prediction:
    """Average rollouts over posterior draws taken round-robin across members."""
    if not members:
        raise BayesError("no ensemble members")
    if draws < 1:
        raise BayesError("draws must be at least 1")
    seqs = np.random.SeedSequence(seed).spawn(draws)
    kept_means: List[np.ndarray] = []
    kept_vars: List[np.ndarray] = []
    failed = 0
    for j in range(draws):
        stats = members[j % len(members)]
        theta = swag_sample(stats, seqs[j])
        params = systems.params_for(spec, theta)
        try:
            frames = systems.rollout(spec, params, mu0, steps)
        except SystemError:
            failed += 1
            continue
        m = np.stack([f.mean for f in frames])
        v = np.stack([f.var for f in frames])
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            failed += 1
            continue
        kept_means.append(m)
        kept_vars.append(v)
    if failed * 2 > draws:
        raise BayesError(f"prediction rejected: {failed} of {draws} draws failed")
    e, aleat, epist, total = _aggregate(np.stack(kept_means), np.stack(kept_vars))
    return Prediction(mean=e, aleatoric=aleat, epistemic=epist, total=total,
                      draws_used=len(kept_means), draws_failed=failed)


def coefficient_posterior(members: Sequence[SwagStats],
                          spec: SystemSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Mixture mean and std of exp(lam) across members.

    Each member's lam marginal is Gaussian (SWAG), so exp(lam) is lognormal;
    the ensemble is an equal-weight mixture of those lognormals.
    """
    n_lam = spec.n_lam
    if n_lam == 0:
        raise BayesError("system has no trainable coefficients")
    if not members:
        raise BayesError("no ensemble members")
    means = []
    seconds = []
    for st in members:
        mu = st.mean[:n_lam]
        s2 = st.marginal_var()[:n_lam]
        m = np.exp(mu + 0.5 * s2)
        v = (np.exp(s2) - 1.0) * np.exp(2.0 * mu + s2)
        means.append(m)
        seconds.append(v + m * m)
    mix_mean = np.mean(means, axis=0)
    mix_var = np.maximum(np.mean(seconds, axis=0) - mix_mean * mix_mean, 0.0)
    return mix_mean, np.sqrt(mix_var)
