"""Conditional reverse diffusion over joint action trajectories.

Trajectories are ``(A, T, 2)`` arrays of (acceleration, yaw rate).  The
forward process is the variance-preserving chain
``tau_k = sqrt(abar_k) tau_0 + sqrt(1 - abar_k) eps`` and the reverse
transition is Gaussian with a predicted mean and a fixed variance
``beta_k`` (no noise on the final step).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dpp import GuidanceSchedule, as_schedule, dpp_log_prob_grad, guidance_term
from .flow import QUALITY_FLOOR, candidate_seeds


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas ``beta_1 .. beta_K`` and their cumulative products."""

    betas: tuple

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("need at least one beta")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", tuple(float(x) for x in b))

    @classmethod
    def linear(cls, num_steps: int = 50, beta_start: float | None = None,
               beta_end: float | None = None) -> "NoiseSchedule":
        """Linear betas.

        The defaults rescale the classic 1e-4 .. 0.02 thousand-step range by
        ``1000 / num_steps`` so that ``abar_K`` is close to zero for short
        chains.
        """
        if num_steps < 1:
            raise ValueError("num_steps must be positive")
        scale = 1000.0 / num_steps
        lo = 1e-4 * scale if beta_start is None else beta_start
        hi = 0.02 * scale if beta_end is None else beta_end
        return cls(tuple(np.clip(np.linspace(lo, hi, num_steps), 1e-8, 0.999)))

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    @property
    def beta(self) -> np.ndarray:
        """Betas indexed by step, with a dummy zero at index 0."""
        return np.concatenate([[0.0], self.betas])

    @property
    def alpha_bar(self) -> np.ndarray:
        """``abar_k`` for ``k = 0 .. K`` with ``abar_0 = 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - np.asarray(self.betas))])

    def posterior_coefs(self, k: int) -> tuple:
        """Weights ``(c_clean, c_noisy)`` of the mean of ``q(tau_{k-1} | tau_k, tau_0)``."""
        ab = self.alpha_bar
        beta = self.beta[k]
        c_clean = np.sqrt(ab[k - 1]) * beta / (1.0 - ab[k])
        c_noisy = np.sqrt(1.0 - beta) * (1.0 - ab[k - 1]) / (1.0 - ab[k])
        return float(c_clean), float(c_noisy)

    def posterior_table(self) -> np.ndarray:
        """Rows ``(c_clean, c_noisy)`` for ``k = 1 .. K``."""
        ab = self.alpha_bar
        beta = np.asarray(self.betas)
        c_clean = np.sqrt(ab[:-1]) * beta / (1.0 - ab[1:])
        c_noisy = np.sqrt(1.0 - beta) * (1.0 - ab[:-1]) / (1.0 - ab[1:])
        return np.column_stack([c_clean, c_noisy])

    def reverse_variance(self, k: int) -> float:
        return 0.0 if k <= 1 else self.beta[k]

    def snr(self) -> np.ndarray:
        ab = self.alpha_bar[1:]
        return ab / (1.0 - ab)


@dataclass(frozen=True)
class NoisyTrajectory:
    actions: np.ndarray
    step: int

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=float)
        if a.shape[-1] != 2:
            raise ValueError("actions need a trailing axis of size 2")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite actions")
        if self.step < 0:
            raise ValueError("diffusion step must be non-negative")
        object.__setattr__(self, "actions", a)


def forward_noise(tau0, k: int, sched: NoiseSchedule, seed=None) -> NoisyTrajectory:
    """Sample ``q(tau_k | tau_0)``; ``k = 0`` returns the clean input."""
    if not 0 <= k <= sched.num_steps:
        raise ValueError(f"step {k} outside [0, {sched.num_steps}]")
    tau0 = np.asarray(tau0, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ab = sched.alpha_bar[k]
    if k == 0:
        return NoisyTrajectory(tau0.copy(), 0)
    eps = rng.standard_normal(tau0.shape)
    return NoisyTrajectory(np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps, k)


# --------------------------------------------------------------------------
# denoisers


def denoiser_rows(tau_k: np.ndarray, cond_rows: np.ndarray | None) -> np.ndarray:
    """Per-(agent, step) base feature rows ``[tau_k (2), condition (D), 1]``.

    ``tau_k`` is ``(A, T, 2)``; ``cond_rows`` is ``(T, A, D)`` (the agent rows
    of the step conditions) or ``None``.
    """
    A, T, _ = tau_k.shape
    parts = [tau_k.reshape(A * T, 2)]
    if cond_rows is not None:
        parts.append(np.transpose(cond_rows, (1, 0, 2)).reshape(A * T, -1))
    parts.append(np.ones((A * T, 1)))
    return np.hstack(parts)


class LinearConditionalDenoiser(RegressorMixin, BaseEstimator):
    """Reverse-mean regressor, one ridge fit per diffusion-step bin.

    ``X`` holds the step ``k`` in its first column and base feature rows
    after it; every row is expanded with the schedule's posterior weights as
    ``[row, c_clean(k) * row, c_noisy(k) * row]`` so that the true
    posterior-mean structure is linear in the coefficients.
    """

    def __init__(self, schedule: NoiseSchedule | None = None, n_bins: int = 4,
                 ridge: float = 1e-6):
        self.schedule = schedule
        self.n_bins = n_bins
        self.ridge = ridge

    def _sched(self):
        return self.schedule or NoiseSchedule.linear()

    def _bins(self, k):
        K = self._sched().num_steps
        return np.minimum(((np.asarray(k) - 1) * self.n_bins) // K, self.n_bins - 1).astype(int)

    def _expand(self, X):
        k = X[:, 0].astype(int)
        base = X[:, 1:]
        sched = self._sched()
        coefs = sched.posterior_table()
        cc = coefs[k - 1, 0][:, None]
        cn = coefs[k - 1, 1][:, None]
        return np.hstack([base, cc * base, cn * base])

    def _check_X(self, X):
        X = check_array(X, dtype=float)
        k = X[:, 0]
        if np.any(k < 1) or np.any(k > self._sched().num_steps) or np.any(k != np.round(k)):
            raise ValueError("step column must hold integers in [1, K]")
        return X

    def partial_fit(self, X, y, sample_weight=None):
        X = self._check_X(X)
        y = np.asarray(y, dtype=float).reshape(len(X), -1)
        w = np.ones(len(X)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        feats = self._expand(X)
        if not hasattr(self, "gram_"):
            F = feats.shape[1]
            self.gram_ = np.zeros((self.n_bins, F, F))
            self.moment_ = np.zeros((self.n_bins, F, y.shape[1]))
            self.counts_ = np.zeros(self.n_bins, dtype=int)
            self.n_features_in_ = X.shape[1]
        bins = self._bins(X[:, 0])
        for b in np.unique(bins):
            sel = bins == b
            fw = feats[sel] * w[sel, None]
            self.gram_[b] += fw.T @ feats[sel]
            self.moment_[b] += fw.T @ y[sel]
            self.counts_[b] += int(sel.sum())
        F = self.gram_.shape[1]
        self.coef_ = np.stack([
            np.linalg.solve(self.gram_[b] + self.ridge * np.eye(F), self.moment_[b])
            if self.counts_[b] else np.zeros_like(self.moment_[b])
            for b in range(self.n_bins)
        ])
        return self

    def fit(self, X, y, sample_weight=None):
        for attr in ("gram_", "moment_", "counts_", "coef_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(X, y, sample_weight)

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


def gaussian_posterior_mean(tau_k, k: int, sched: NoiseSchedule, mean, var: float):
    """``E[tau_{k-1} | tau_k]`` when ``tau_0 ~ N(mean, var I)``.

    Conjugacy gives ``E[tau_0 | tau_k]`` in closed form; the posterior mean
    of the forward chain is linear in ``tau_0``, so plugging it in yields the
    exact reverse mean.
    """
    ab = sched.alpha_bar[k]
    mean = np.asarray(mean, dtype=float)
    gain = np.sqrt(ab) * var / (ab * var + 1.0 - ab)
    clean = mean + gain * (tau_k - np.sqrt(ab) * mean)
    c_clean, c_noisy = sched.posterior_coefs(k)
    return c_clean * clean + c_noisy * tau_k


@dataclass
class DenoiserSpec:
    """Reverse-mean predictor.

    kinds
        ``linear_conditional``: params ``coef`` (bins, F, 2), ``n_bins``.
        ``gaussian_oracle``: params ``mean`` (broadcastable to the
        trajectory shape) and ``var``.
    """

    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in ("linear_conditional", "gaussian_oracle"):
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        for k, v in self.params.items():
            if not np.all(np.isfinite(np.asarray(v, dtype=float))):
                raise ValueError(f"parameter {k} is not finite")

    def mean(self, tau_k: np.ndarray, k: int, cond_rows, sched: NoiseSchedule) -> np.ndarray:
        tau_k = np.asarray(tau_k, dtype=float)
        if self.kind == "gaussian_oracle":
            return gaussian_posterior_mean(tau_k, k, sched, self.params["mean"],
                                           float(self.params["var"]))
        coef = np.asarray(self.params["coef"], dtype=float)
        est = LinearConditionalDenoiser(schedule=sched, n_bins=coef.shape[0])
        est.coef_ = coef
        rows = denoiser_rows(tau_k, cond_rows)
        X = np.hstack([np.full((len(rows), 1), float(k)), rows])
        return est.predict(X).reshape(tau_k.shape)


def _cond_rows(cond, tau_shape):
    """Agent rows of a step-condition set, validated against the trajectory."""
    if cond is None:
        return None
    arr = cond.conditions if hasattr(cond, "conditions") else np.asarray(cond)
    A, T = tau_shape[0], tau_shape[1]
    if arr.ndim != 3 or arr.shape[0] != T or arr.shape[1] < A:
        raise ValueError(f"conditions of shape {arr.shape} do not cover {A} agents x {T} steps")
    return arr[:, :A, :]


def reverse_step_guided(denoiser: DenoiserSpec, tau_k: NoisyTrajectory, cond,
                        sched: NoiseSchedule, shift=None, seed=None) -> NoisyTrajectory:
    """One reverse step: predicted mean, plus guidance shift, plus noise.

    The guidance shift is added to the mean before noise is injected; the
    final step (``k = 1``) is noise free.
    """
    k = tau_k.step
    if k < 1:
        raise ValueError("cannot step below k = 0")
    rows = _cond_rows(cond, tau_k.actions.shape) if denoiser.kind != "gaussian_oracle" else None
    mu = denoiser.mean(tau_k.actions, k, rows, sched)
    if shift is not None:
        mu = mu + np.asarray(shift, dtype=float)
    var = sched.reverse_variance(k)
    if var > 0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        mu = mu + np.sqrt(var) * rng.standard_normal(mu.shape)
    return NoisyTrajectory(mu, k - 1)


class FlattenEmbedding:
    """Identity embedding: a trajectory is its flattened action vector."""

    def __call__(self, tau):
        return np.asarray(tau, dtype=float).reshape(len(tau), -1)

    def vjp(self, tau, grad_emb):
        return np.asarray(grad_emb, dtype=float).reshape(np.shape(tau))


def sample_motions_guided(denoiser: DenoiserSpec, cond, m: int, sched: NoiseSchedule,
                          guidance: GuidanceSchedule | float | None = None,
                          quality_fn: Optional[Callable[[np.ndarray], float]] = None,
                          seed: int = 0, shape: tuple | None = None,
                          embedding=None, seeds: Optional[Sequence[int]] = None) -> np.ndarray:
    """Jointly sample ``m`` action trajectories with DPP repulsion.

    At each reverse step the DPP is built over ``embedding(tau_k)`` for the
    ``m`` current candidates, weighted by ``quality_fn`` of each candidate.
    The ascent direction on its log-probability is pulled back through the
    embedding and added to every candidate's mean.  Candidates draw their
    noise from independent per-candidate generators, so zero guidance
    reproduces unguided sampling exactly.

    Returns an array of shape ``(m,) + shape``.
    """
    if m < 1:
        raise ValueError("need at least one candidate")
    guidance = as_schedule(guidance)
    if shape is None:
        if cond is None:
            raise ValueError("shape is required without conditions")
        arr = cond.conditions if hasattr(cond, "conditions") else np.asarray(cond)
        shape = (arr.shape[1], arr.shape[0], 2)
    seeds = candidate_seeds(seed, m) if seeds is None else list(seeds)
    if len(seeds) != m:
        raise ValueError("one seed per candidate is required")
    embedding = embedding or FlattenEmbedding()
    rngs = [np.random.default_rng(s) for s in seeds]
    tau = np.stack([r.standard_normal(shape) for r in rngs])
    K = sched.num_steps
    rows = _cond_rows(cond, shape) if denoiser.kind != "gaussian_oracle" else None
    guided = guidance.active and m > 1
    for step, k in enumerate(range(K, 0, -1)):
        shift = None
        if guided:
            emb = embedding(tau)
            q = None
            if quality_fn is not None:
                q = np.clip([quality_fn(tau[j]) for j in range(m)], QUALITY_FLOOR, 1.0)
            energy_grad = -embedding.vjp(tau, dpp_log_prob_grad(emb, q))
            shift = guidance_term(energy_grad, guidance, step, K)
        out = np.empty_like(tau)
        for j in range(m):
            mu = denoiser.mean(tau[j], k, rows, sched)
            if shift is not None:
                mu = mu + shift[j]
            var = sched.reverse_variance(k)
            if var > 0:
                mu = mu + np.sqrt(var) * rngs[j].standard_normal(mu.shape)
            out[j] = mu
        tau = out
    return tau
