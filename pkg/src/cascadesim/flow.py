"""Rectified-flow world model over latent occupancy sequences.

The velocity field is a linear map per time bin acting on per-cell feature
rows.  A row describes one latent cell of one future frame::

    [z_cell (C), last history cell (C), last - previous history cell (C),
     lead-time fraction, global condition (G), 1]

and the time basis doubles every row as ``[row, row / (1 - t)]``, which
lets a linear model represent the straight-line field ``(target - z) / (1 - t)``
of a deterministic future exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dpp import GuidanceSchedule, as_schedule, dpp_log_prob_grad, guidance_term
from .occupancy import EgoPose2D, LatentGrid, LatentWeightMap
from .traffic import wrap_angle

T_CLIP = 1.0 - 1e-3
QUALITY_FLOOR = 1e-6


def candidate_seeds(seed: int, n: int) -> list:
    """Independent per-candidate seeds derived from one run seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class WorldCondition:
    """Latent occupancy and ego pose history over ``T_h + 1`` frames."""

    latent_history: list
    ego_history: list

    def __post_init__(self):
        if len(self.latent_history) != len(self.ego_history):
            raise ValueError("latent and ego histories must have equal length")
        if not self.latent_history:
            raise ValueError("history is empty")

    @property
    def latents(self) -> np.ndarray:
        return np.stack([z.data if isinstance(z, LatentGrid) else np.asarray(z)
                         for z in self.latent_history])

    def cell_features(self) -> np.ndarray:
        """``(H, W, 2C)``: last frame and its change from the previous frame."""
        lat = self.latents
        last = lat[-1]
        prev = lat[-2] if len(lat) > 1 else lat[-1]
        return np.concatenate([last, last - prev], axis=-1)

    def global_features(self) -> np.ndarray:
        """Per-frame mean latent occupancy followed by ego displacements.

        The ego part is the last-step and whole-history motion
        ``(dx, dy, dheading)`` expressed in the current ego frame.
        """
        pooled = self.latents.reshape(len(self.latent_history), -1).mean(axis=1)
        cur = self.ego_history[-1]
        c, s = np.cos(cur.heading), np.sin(cur.heading)

        def rel(p: EgoPose2D):
            dx, dy = cur.x - p.x, cur.y - p.y
            return [c * dx + s * dy, -s * dx + c * dy, float(wrap_angle(cur.heading - p.heading))]

        prev = self.ego_history[-2] if len(self.ego_history) > 1 else cur
        return np.concatenate([pooled, rel(prev), rel(self.ego_history[0])])


def n_global_features(history_len: int) -> int:
    return history_len + 6


def base_features(z: np.ndarray, cond_cells: np.ndarray, cond_global: np.ndarray) -> np.ndarray:
    """Feature rows (without time column) for one latent sequence.

    ``z`` has shape ``(T, H, W, C)``; rows are ordered frame-major then
    row-major over cells.
    """
    T, H, W, C = z.shape
    n = H * W
    frac = np.repeat((np.arange(T) + 1.0) / T, n)[:, None]
    cells = np.broadcast_to(cond_cells.reshape(1, n, -1), (T, n, cond_cells.shape[-1]))
    glob = np.broadcast_to(cond_global, (T * n, cond_global.size))
    return np.hstack([z.reshape(T * n, C), cells.reshape(T * n, -1), frac, glob,
                      np.ones((T * n, 1))])


def interpolate(z0, z_target, t: float):
    """Straight-line interpolant ``(1 - t) z0 + t z_target``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    z0 = np.asarray(z0, dtype=float)
    z_target = np.asarray(z_target, dtype=float)
    if z0.shape != z_target.shape:
        raise ValueError("interpolation endpoints differ in shape")
    return (1.0 - t) * z0 + t * z_target


def gaussian_oracle_velocity(m, var: float, z, t: float):
    """Optimal straight-line velocity for ``N(0, I) -> N(m, var I)``.

    This is ``E[target - z0 | z_t = z]`` under the independent coupling,
    obtained by Gaussian conditioning.
    """
    m = np.asarray(m, dtype=float)
    z = np.asarray(z, dtype=float)
    if var <= 0:
        raise ValueError("target variance must be positive")
    gain = (t * var - (1.0 - t)) / ((1.0 - t) ** 2 + t * t * var)
    return m + gain * (z - t * m)


class LinearVelocityField(RegressorMixin, BaseEstimator):
    """Ridge-regularised weighted least squares, one linear map per time bin.

    ``X`` holds the flow time ``t`` in its first column and feature rows in
    the remaining columns; ``y`` holds target velocities.  With
    ``time_basis=True`` each row is expanded to ``[row, row / (1 - t)]``.
    ``partial_fit`` accumulates normal equations so large datasets can be
    streamed in chunks.
    """

    def __init__(self, n_bins: int = 8, ridge: float = 1e-6, time_basis: bool = True):
        self.n_bins = n_bins
        self.ridge = ridge
        self.time_basis = time_basis

    def _bins(self, t):
        return np.minimum((np.asarray(t) * self.n_bins).astype(int), self.n_bins - 1)

    def _expand(self, X):
        t, base = X[:, 0], X[:, 1:]
        if not self.time_basis:
            return base
        scale = 1.0 / (1.0 - np.minimum(t, T_CLIP))
        return np.hstack([base, base * scale[:, None]])

    def _check_X(self, X):
        X = check_array(X, dtype=float)
        if np.any(X[:, 0] < 0) or np.any(X[:, 0] > 1):
            raise ValueError("time column must lie in [0, 1]")
        return X

    def _reset(self, n_features, n_targets):
        F = 2 * (n_features - 1) if self.time_basis else n_features - 1
        self.gram_ = np.zeros((self.n_bins, F, F))
        self.moment_ = np.zeros((self.n_bins, F, n_targets))
        self.counts_ = np.zeros(self.n_bins, dtype=int)
        self.n_features_in_ = n_features

    def partial_fit(self, X, y, sample_weight=None):
        X = self._check_X(X)
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if len(y) != len(X):
            raise ValueError("X and y differ in length")
        w = np.ones(len(X)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        if not hasattr(self, "gram_"):
            self._reset(X.shape[1], y.shape[1])
        feats = self._expand(X)
        bins = self._bins(X[:, 0])
        for b in np.unique(bins):
            sel = bins == b
            fw = feats[sel] * w[sel, None]
            self.gram_[b] += fw.T @ feats[sel]
            self.moment_[b] += fw.T @ y[sel]
            self.counts_[b] += int(sel.sum())
        self._solve()
        return self

    def fit(self, X, y, sample_weight=None):
        for attr in ("gram_", "moment_", "counts_", "coef_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(X, y, sample_weight)

    def _solve(self):
        F = self.gram_.shape[1]
        coef = np.zeros_like(self.moment_)
        for b in range(self.n_bins):
            if self.counts_[b] == 0:
                continue  # empty bin keeps the zero map
            coef[b] = np.linalg.solve(self.gram_[b] + self.ridge * np.eye(F), self.moment_[b])
        self.coef_ = coef

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = self._check_X(X)
        feats = self._expand(X)
        bins = self._bins(X[:, 0])
        out = np.empty((len(X), self.coef_.shape[2]))
        for b in np.unique(bins):
            sel = bins == b
            out[sel] = feats[sel] @ self.coef_[b]
        return out

    def score(self, X, y, sample_weight=None):
        # negative weighted sum of squared residuals, comparable to the loss
        res = self.predict(X) - np.asarray(y, dtype=float).reshape(len(X), -1)
        w = np.ones(len(X)) if sample_weight is None else np.asarray(sample_weight)
        return -float(np.sum(w[:, None] * res ** 2))


@dataclass
class VelocityFieldSpec:
    """A fitted or analytic velocity field.

    kinds
        ``linear_per_bin``: params ``coef`` (bins, F, C), ``latent_dims``,
        ``horizon``, ``history_len``.
        ``gaussian_oracle``: params ``mean`` (d,), ``var``.
        ``tabulated``: params ``times`` (K,), ``values`` (K, d); a
        state-independent drift interpolated linearly in time.
    """

    kind: str
    params: dict
    condition_dim: int = 0

    def __post_init__(self):
        if self.kind not in ("linear_per_bin", "gaussian_oracle", "tabulated"):
            raise ValueError(f"unknown velocity field kind {self.kind!r}")
        for k, v in self.params.items():
            if not np.all(np.isfinite(np.asarray(v, dtype=float))):
                raise ValueError(f"parameter {k} is not finite")

    @property
    def event_shape(self) -> tuple:
        if self.kind == "linear_per_bin":
            H, W, C = (int(d) for d in self.params["latent_dims"])
            return (int(self.params["horizon"]), H, W, C)
        if self.kind == "gaussian_oracle":
            return tuple(np.shape(self.params["mean"]))
        return tuple(np.shape(self.params["values"])[1:])

    def velocity(self, z, t: float, cond: Optional[WorldCondition] = None) -> np.ndarray:
        """Velocity for a single candidate of shape :attr:`event_shape`."""
        z = np.asarray(z, dtype=float)
        if self.kind == "gaussian_oracle":
            return gaussian_oracle_velocity(self.params["mean"], float(self.params["var"]), z, t)
        if self.kind == "tabulated":
            times = np.asarray(self.params["times"], dtype=float)
            vals = np.asarray(self.params["values"], dtype=float)
            flat = vals.reshape(len(times), -1)
            out = np.array([np.interp(t, times, flat[:, j]) for j in range(flat.shape[1])])
            return np.broadcast_to(out.reshape(vals.shape[1:]), z.shape).copy()
        if cond is None:
            raise ValueError("linear_per_bin fields need a world condition")
        coef = np.asarray(self.params["coef"], dtype=float)
        n_bins = coef.shape[0]
        rows = base_features(z, cond.cell_features(), cond.global_features())
        scale = 1.0 / (1.0 - min(t, T_CLIP))
        feats = np.hstack([rows, rows * scale])
        b = min(int(t * n_bins), n_bins - 1)
        return (feats @ coef[b]).reshape(z.shape)


@dataclass
class FlowBatch:
    """Training samples for the world model.

    ``z0`` and ``z_target`` are ``(B, T, H, W, C)``, ``t`` is ``(B,)``,
    ``conds`` holds one :class:`WorldCondition` per sample and ``weights``
    is ``(B, T, H, W)`` (per-frame motion weight maps).
    """

    z0: np.ndarray
    z_target: np.ndarray
    t: np.ndarray
    conds: list
    weights: np.ndarray

    def __len__(self):
        return len(self.t)

    def design(self, i: int):
        """Feature matrix (time column first), targets and row weights of sample ``i``."""
        zt = interpolate(self.z0[i], self.z_target[i], float(self.t[i]))
        cond = self.conds[i]
        rows = base_features(zt, cond.cell_features(), cond.global_features())
        X = np.hstack([np.full((len(rows), 1), float(self.t[i])), rows])
        C = zt.shape[-1]
        y = (self.z_target[i] - self.z0[i]).reshape(-1, C)
        w = np.broadcast_to(np.asarray(self.weights[i], dtype=float), zt.shape[:-1]).reshape(-1)
        return X, y, w


def _batch_weights(batch: FlowBatch, w) -> np.ndarray:
    if w is None:
        return np.asarray(batch.weights, dtype=float)
    data = w.data if isinstance(w, LatentWeightMap) else np.asarray(w, dtype=float)
    return np.broadcast_to(data, batch.z_target.shape[:-1])


def motion_aware_rf_loss(model: VelocityFieldSpec, batch: FlowBatch, w=None) -> float:
    """Batch mean of ``sum_cells W * |v(z_t) - (target - z0)|^2``.

    ``w`` may be a single :class:`LatentWeightMap` broadcast over frames and
    samples; by default the per-frame maps stored on the batch are used.
    """
    weights = _batch_weights(batch, w)
    total = 0.0
    for i in range(len(batch)):
        zt = interpolate(batch.z0[i], batch.z_target[i], float(batch.t[i]))
        res = model.velocity(zt, float(batch.t[i]), batch.conds[i]) - (batch.z_target[i] - batch.z0[i])
        total += float(np.sum(weights[i] * np.sum(res ** 2, axis=-1)))
    return total / len(batch)


def region_residual(model: VelocityFieldSpec, batch: FlowBatch, region) -> float:
    """Unweighted mean squared velocity residual over cells where ``region`` holds.

    ``region`` is boolean with shape ``(B, T, H, W)`` or broadcastable to it.
    """
    region = np.broadcast_to(np.asarray(region, dtype=bool), batch.z_target.shape[:-1])
    sq, count = 0.0, 0
    for i in range(len(batch)):
        zt = interpolate(batch.z0[i], batch.z_target[i], float(batch.t[i]))
        res = model.velocity(zt, float(batch.t[i]), batch.conds[i]) - (batch.z_target[i] - batch.z0[i])
        cell = np.sum(res ** 2, axis=-1)
        sq += float(cell[region[i]].sum())
        count += int(region[i].sum())
    return sq / max(count, 1)


def fit_linear_velocity(batch: FlowBatch, weights=None, bins: int = 8,
                        ridge: float = 1e-6) -> VelocityFieldSpec:
    """Closed-form motion-aware fit of a ``linear_per_bin`` field.

    Minimises the weighted objective of :func:`motion_aware_rf_loss` within
    every time bin.  Bins without samples fall back to the zero map.
    """
    w_all = _batch_weights(batch, weights)
    est = LinearVelocityField(n_bins=bins, ridge=ridge)
    for i in range(len(batch)):
        X, y, _ = batch.design(i)
        est.partial_fit(X, y, sample_weight=np.asarray(w_all[i]).reshape(-1))
    T, H, W, C = batch.z_target.shape[1:]
    hist_len = len(batch.conds[0].latent_history)
    return VelocityFieldSpec(
        "linear_per_bin",
        {"coef": est.coef_, "latent_dims": np.array([H, W, C]), "horizon": T,
         "history_len": hist_len},
        condition_dim=n_global_features(hist_len),
    )


@dataclass
class FlowSamplerConfig:
    num_steps: int = 20
    seed: int = 0
    guidance: GuidanceSchedule = field(default_factory=GuidanceSchedule)
    horizon: int = 80

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be at least 1")
        self.guidance = as_schedule(self.guidance)


def sample_flow_guided(model: VelocityFieldSpec, cond: Optional[WorldCondition], n: int,
                       cfg: FlowSamplerConfig,
                       quality_fn: Optional[Callable[[np.ndarray], float]] = None,
                       seeds: Optional[Sequence[int]] = None) -> np.ndarray:
    """Euler-integrate the flow ODE for ``n`` candidates with DPP repulsion.

    Each step applies ``z <- z + dt * v(z, t) + shift`` where the shift
    ascends the quality-weighted DPP log-probability of the current
    candidate set.  Quality is evaluated on the one-step endpoint estimate
    ``z + (1 - t) v``.  With zero guidance strength the result equals plain
    Euler sampling bit for bit.

    Returns an array of shape ``(n,) + model.event_shape``.
    """
    if n < 1:
        raise ValueError("need at least one candidate")
    seeds = candidate_seeds(cfg.seed, n) if seeds is None else list(seeds)
    if len(seeds) != n:
        raise ValueError("one seed per candidate is required")
    shape = model.event_shape
    z = np.stack([np.random.default_rng(s).standard_normal(shape) for s in seeds])
    K = cfg.num_steps
    dt = 1.0 / K
    guided = cfg.guidance.active and n > 1
    for step in range(K):
        t = step * dt
        v = np.stack([model.velocity(z[i], t, cond) for i in range(n)])
        z_next = z + dt * v
        if guided:
            q = None
            if quality_fn is not None:
                decoded = z + (1.0 - t) * v
                q = np.clip([quality_fn(decoded[i]) for i in range(n)], QUALITY_FLOOR, 1.0)
            energy_grad = -dpp_log_prob_grad(z.reshape(n, -1), q)
            shift = guidance_term(energy_grad, cfg.guidance, step, K)
            z_next = z_next + shift.reshape(z.shape)
        z = z_next
    return z
