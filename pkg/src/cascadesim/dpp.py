"""Quality-weighted determinantal diversity over a set of jointly sampled candidates.

The whole candidate set is treated as the DPP ground set and scored by the
probability of selecting all of it under an L-ensemble,
``P = det(L) / det(L + I)`` with ``L = diag(q) K diag(q)`` and ``K`` the
cosine-similarity Gram matrix.  Gradients of ``log P`` with respect to the
candidate vectors drive the repulsive guidance used by both samplers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

LOG_PROB_FLOOR = float(np.log(1e-300))
NORM_EPS = 1e-12
GRAD_JITTER = 1e-8


def _as_candidates(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError("candidates must be a non-empty (K, d) array")
    if not np.all(np.isfinite(x)):
        raise ValueError("candidates contain non-finite entries")
    return x


def _as_quality(q, k: int):
    if q is None:
        return None
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != k:
        raise ValueError(f"expected {k} quality weights, got {q.shape[0]}")
    if np.any(q <= 0) or np.any(q > 1) or not np.all(np.isfinite(q)):
        raise ValueError("quality weights must lie in (0, 1]")
    return q


def _normalize(x, eps=NORM_EPS):
    norms = np.maximum(np.linalg.norm(x, axis=1), eps)
    return x / norms[:, None], norms


def build_kernel(x, q=None, eps: float = NORM_EPS) -> np.ndarray:
    """Cosine-similarity kernel, optionally conjugated by quality weights.

    Zero vectors are handled by flooring norms at ``eps``; they end up with a
    zero row and column rather than raising.
    """
    x = _as_candidates(x)
    q = _as_quality(q, x.shape[0])
    xh, _ = _normalize(x, eps)
    lam = xh @ xh.T
    lam = 0.5 * (lam + lam.T)
    if q is not None:
        lam = q[:, None] * lam * q[None, :]
    return lam


def _check_kernel(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
        raise ValueError("kernel must be a square matrix")
    if not np.allclose(lam, lam.T, rtol=0.0, atol=1e-10):
        raise ValueError("kernel must be symmetric")
    return lam


def dpp_log_prob(lam, singular_tol: float = 1e-12) -> float:
    """``log det(L) - log det(L + I)``, clamped at ``log(1e-300)``.

    A kernel whose smallest eigenvalue is below ``singular_tol`` (relative
    to the largest, floored at 1) is treated as singular and returns the
    clamp value.
    """
    lam = _check_kernel(lam)
    ev = np.linalg.eigvalsh(lam)
    if ev[0] <= singular_tol * max(1.0, ev[-1]):
        return LOG_PROB_FLOOR
    logp = float(np.sum(np.log(ev)) - np.sum(np.log1p(ev)))
    return max(logp, LOG_PROB_FLOOR)


def dpp_prob(lam) -> float:
    return float(np.exp(dpp_log_prob(lam)))


def jittered_log_prob(x, q=None, jitter: float = GRAD_JITTER) -> float:
    """The smooth objective differentiated by :func:`dpp_log_prob_grad`."""
    lam = build_kernel(x, q)
    k = lam.shape[0]
    _, ld_a = np.linalg.slogdet(lam + jitter * np.eye(k))
    _, ld_b = np.linalg.slogdet(lam + np.eye(k))
    return float(ld_a - ld_b)


def dpp_log_prob_grad(x, q=None, jitter: float = GRAD_JITTER,
                      eps: float = NORM_EPS) -> np.ndarray:
    """Analytic gradient of the jittered log-probability w.r.t. each candidate.

    The objective is ``log det(L + jitter*I) - log det(L + I)``.  Quality
    weights are held constant.  Returns an array with the shape of ``x``.
    """
    x = _as_candidates(x)
    k = x.shape[0]
    q = _as_quality(q, k)
    if k == 1:
        # cosine self-similarity is identically one
        return np.zeros_like(x)
    xh, norms = _normalize(x, eps)
    lam = build_kernel(x, q, eps)
    eye = np.eye(k)
    g_lam = np.linalg.inv(lam + jitter * eye) - np.linalg.inv(lam + eye)
    g_lam = 0.5 * (g_lam + g_lam.T)
    if q is not None:
        g_lam = q[:, None] * g_lam * q[None, :]
    g_xh = 2.0 * g_lam @ xh
    # back through x / max(|x|, eps)
    scaled = norms > eps
    radial = np.einsum("kd,kd->k", xh, g_xh)
    g_x = np.where(scaled[:, None], (g_xh - xh * radial[:, None]) / norms[:, None], g_xh / eps)
    return g_x


@dataclass(frozen=True)
class GuidanceSchedule:
    """Strength of the diversity shift over sampler iterations.

    ``profile`` is either ``"constant"``, ``"linear"`` (decaying from 1 to
    ``1/num_steps`` as sampling proceeds) or an explicit sequence of
    non-negative per-step multipliers.
    """

    base_strength: float = 0.0
    profile: Union[str, Sequence[float]] = "constant"
    normalize_by_grad_norm: bool = True

    def __post_init__(self):
        if self.base_strength < 0:
            raise ValueError("base_strength must be non-negative")
        if isinstance(self.profile, str):
            if self.profile not in ("constant", "linear"):
                raise ValueError(f"unknown guidance profile {self.profile!r}")
        else:
            prof = tuple(float(p) for p in self.profile)
            if any(p < 0 for p in prof):
                raise ValueError("guidance multipliers must be non-negative")
            object.__setattr__(self, "profile", prof)

    @property
    def active(self) -> bool:
        return self.base_strength > 0

    def multiplier(self, step: int, num_steps: int | None = None) -> float:
        if isinstance(self.profile, tuple):
            if not 0 <= step < len(self.profile):
                raise IndexError(f"step {step} outside a profile of length {len(self.profile)}")
            return self.profile[step]
        if self.profile == "constant":
            return 1.0
        if num_steps is None or not 0 <= step < num_steps:
            raise IndexError("linear profile needs 0 <= step < num_steps")
        return (num_steps - step) / num_steps

    def to_dict(self) -> dict:
        prof = self.profile if isinstance(self.profile, str) else list(self.profile)
        return {"base_strength": self.base_strength, "profile": prof,
                "normalize_by_grad_norm": self.normalize_by_grad_norm}

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceSchedule":
        return cls(float(d["base_strength"]), d.get("profile", "constant"),
                   bool(d.get("normalize_by_grad_norm", True)))


def as_schedule(g) -> GuidanceSchedule:
    if g is None:
        return GuidanceSchedule(0.0)
    if isinstance(g, GuidanceSchedule):
        return g
    return GuidanceSchedule(float(g))


def guidance_term(grads, schedule: GuidanceSchedule, step: int,
                  num_steps: int | None = None, eps: float = NORM_EPS) -> np.ndarray:
    """Shift vectors ``-strength * g / max(|g|_joint, eps)``.

    The norm is taken over all candidates stacked together.  A zero strength
    gives an exactly zero shift.
    """
    grads = np.asarray(grads, dtype=float)
    strength = schedule.base_strength * schedule.multiplier(step, num_steps)
    if strength == 0.0:
        return np.zeros_like(grads)
    if schedule.normalize_by_grad_norm:
        return -strength * grads / max(float(np.linalg.norm(grads)), eps)
    return -strength * grads
