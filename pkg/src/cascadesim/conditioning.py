"""Scene tokens, predictive context pooling and per-step motion conditions.

Latent grids are flattened row-major over ``(H, W, C)``.  The pooler
projections are fixed seeded constants rather than trained weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .occupancy import LatentGrid


@dataclass(frozen=True)
class SceneEncoding:
    """Token matrix with agent rows first, then lane rows, then light rows."""

    tokens: np.ndarray
    n_agents: int
    n_lanes: int
    n_lights: int

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=float)
        if tok.ndim != 2 or tok.shape[0] != self.n_agents + self.n_lanes + self.n_lights:
            raise ValueError("token rows must match element counts")
        if not np.all(np.isfinite(tok)):
            raise ValueError("non-finite scene tokens")
        object.__setattr__(self, "tokens", tok)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def _to_frame(xy, origin, heading):
    c, s = np.cos(heading), np.sin(heading)
    d = np.asarray(xy, dtype=float) - origin
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def _fit_row(vals, dim):
    row = np.zeros(dim)
    vals = np.asarray(vals, dtype=float).reshape(-1)[:dim]
    row[: vals.size] = vals
    return row


def toy_scene_encode(scenario, dim: int = 32) -> SceneEncoding:
    """Deterministic frame-relative features for every scene element.

    Agent rows hold the last ``dim // 6`` history states as
    ``(x, y, vx, vy, sin, cos)`` in the focal agent's current frame, newest
    first.  Lane rows hold start, end, unit direction, half width and length.
    Light rows hold a one-hot of the three light states and the position.
    """
    hist = np.asarray(scenario.history, dtype=float)
    focal = hist[scenario.ego_index, -1]
    origin, yaw = focal[:2], focal[3]
    n_keep = max(dim // 6, 1)
    rows = []
    for a in range(hist.shape[0]):
        h = hist[a, ::-1][:n_keep]
        pos = _to_frame(h[:, :2], origin, yaw)
        rel = h[:, 3] - yaw
        vel = h[:, 2:3] * np.stack([np.cos(rel), np.sin(rel)], axis=-1)
        feats = np.hstack([pos, vel, np.sin(rel)[:, None], np.cos(rel)[:, None]])
        rows.append(_fit_row(feats, dim))
    lane_map = scenario.lane_map
    for line, hw in zip(lane_map.polylines, lane_map.half_widths):
        pts = _to_frame(np.asarray(line)[[0, -1]], origin, yaw)
        d = pts[1] - pts[0]
        length = float(np.linalg.norm(d))
        u = d / length if length > 0 else np.zeros(2)
        rows.append(_fit_row([*pts[0], *pts[1], *u, hw, length], dim))
    for light in scenario.lights:
        onehot = np.zeros(3)
        onehot[int(light["state"])] = 1.0
        pos = _to_frame(np.asarray(light["position"], dtype=float), origin, yaw)
        rows.append(_fit_row([*onehot, *pos], dim))
    return SceneEncoding(np.vstack(rows), hist.shape[0], len(lane_map), len(scenario.lights))


@dataclass(frozen=True)
class PoolerParams:
    """Fixed attention parameters.

    ``proj_in`` maps flattened latents to keys/values for context pooling;
    ``proj_cond`` maps both the latent token and the zero-padded context
    token to keys/values for step conditioning.
    """

    query: np.ndarray
    proj_in: np.ndarray
    proj_cond: np.ndarray
    num_heads: int = 1
    stride: int = 10

    def __post_init__(self):
        q = np.asarray(self.query, dtype=float).reshape(1, -1)
        p1 = np.asarray(self.proj_in, dtype=float)
        p2 = np.asarray(self.proj_cond, dtype=float)
        D = q.shape[1]
        if p1.shape[1] != D or p2.shape != p1.shape:
            raise ValueError("projections must be (latent_dim, D) and agree with the query")
        if p1.shape[0] < D:
            raise ValueError("latent size must be at least D to embed the context token")
        if self.num_heads < 1 or D % self.num_heads:
            raise ValueError("D must be divisible by num_heads")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        for a in (q, p1, p2):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite pooler parameters")
        object.__setattr__(self, "query", q)
        object.__setattr__(self, "proj_in", p1)
        object.__setattr__(self, "proj_cond", p2)

    @property
    def dim(self) -> int:
        return self.query.shape[1]

    @classmethod
    def seeded(cls, latent_dim: int, dim: int = 32, num_heads: int = 1, stride: int = 10,
               seed: int = 0) -> "PoolerParams":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)
        return cls(rng.standard_normal((1, dim)) * scale,
                   rng.standard_normal((latent_dim, dim)) * scale,
                   rng.standard_normal((latent_dim, dim)) * scale, num_heads, stride)


@dataclass(frozen=True)
class StepConditionSet:
    """``conditions`` is ``(T_f, rows, D)``; ``context`` is ``(1, D)``."""

    conditions: np.ndarray
    context: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.conditions, dtype=float)
        if c.ndim != 3:
            raise ValueError("conditions must be (T_f, rows, D)")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite conditions")
        object.__setattr__(self, "conditions", c)
        object.__setattr__(self, "context", np.asarray(self.context, dtype=float).reshape(1, -1))

    def __len__(self):
        return self.conditions.shape[0]


def attention(queries, keys, values, num_heads: int = 1) -> np.ndarray:
    """Scaled dot-product attention with the feature axis split across heads."""
    queries = np.atleast_2d(queries)
    D = queries.shape[-1]
    hd = D // num_heads
    out = np.empty((queries.shape[0], values.shape[-1]))
    vd = values.shape[-1] // num_heads
    for h in range(num_heads):
        qs = queries[:, h * hd:(h + 1) * hd]
        ks = keys[:, h * hd:(h + 1) * hd]
        logits = qs @ ks.T / np.sqrt(hd)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out[:, h * vd:(h + 1) * vd] = w @ values[:, h * vd:(h + 1) * vd]
    return out


def _flat(z) -> np.ndarray:
    data = z.data if isinstance(z, LatentGrid) else np.asarray(z, dtype=float)
    return data.reshape(-1)


def selected_frames(horizon: int, stride: int) -> list:
    """Rollout indices of frames ``e * stride`` for ``e = 1 .. horizon // stride``.

    Frame ``f`` (1-based future time) lives at index ``f - 1``; when the
    horizon is shorter than the stride only the last frame is used.
    """
    n = horizon // stride
    if n == 0:
        return [horizon - 1]
    return [e * stride - 1 for e in range(1, n + 1)]


def attention_pool(latents, params: PoolerParams) -> np.ndarray:
    """Predictive context ``g`` (``1 x D``) from stride-subsampled latents."""
    if len(latents) == 0:
        raise ValueError("no latents to pool")
    tokens = np.stack([_flat(latents[i]) for i in selected_frames(len(latents), params.stride)])
    if tokens.shape[1] != params.proj_in.shape[0]:
        raise ValueError("latent size does not match the pooler projection")
    kv = tokens @ params.proj_in
    return attention(params.query, kv, kv, params.num_heads)


def build_step_conditions(rollout, g, h: SceneEncoding, params: PoolerParams) -> StepConditionSet:
    """Per-step conditions: scene rows attend over ``{latent_t, g}`` tokens.

    ``g`` is zero-padded to the latent size so both tokens share ``proj_cond``.
    """
    g = np.asarray(g, dtype=float).reshape(-1)
    L = params.proj_cond.shape[0]
    g_tok = np.zeros(L)
    g_tok[: g.size] = g
    g_kv = g_tok @ params.proj_cond
    tokens = h.tokens if isinstance(h, SceneEncoding) else np.asarray(h, dtype=float)
    out = np.empty((len(rollout), tokens.shape[0], params.dim))
    for t, z in enumerate(rollout):
        flat = _flat(z)
        if flat.size != L:
            raise ValueError("latent size does not match the pooler projection")
        kv = np.vstack([flat @ params.proj_cond, g_kv])
        out[t] = attention(tokens, kv, kv, params.num_heads)
    return StepConditionSet(out, g)
