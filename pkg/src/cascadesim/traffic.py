"""Agent kinematics, violation metrics and realism aggregates.

States are arrays whose last axis is ``(x, y, v, theta)``; actions have a
last axis ``(accel, yaw_rate)``.  Every function here broadcasts over
leading axes, so a joint multi-agent trajectory is simply an array of shape
``(A, T + 1, 4)`` and a set of rollouts adds one more leading axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_FOOTPRINT = (4.6, 2.0)

# weights of the kinematic / interactive / map-based buckets
RMM_WEIGHTS = (0.20, 0.45, 0.35)


def wrap_angle(a):
    """Wrap angles to the half-open interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    v: float
    theta: float

    def __post_init__(self):
        vals = (self.x, self.y, self.v, self.theta)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite agent state {vals}")
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.theta], dtype=float)

    @classmethod
    def from_array(cls, a) -> "AgentState":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass
class LaneMap:
    """Directed lane centerlines, each with a half-width corridor in meters."""

    polylines: list
    half_widths: list

    def __post_init__(self):
        self.polylines = [np.asarray(p, dtype=float) for p in self.polylines]
        self.half_widths = [float(w) for w in self.half_widths]
        if len(self.polylines) != len(self.half_widths):
            raise ValueError("one half-width per polyline is required")
        for p in self.polylines:
            if p.ndim != 2 or p.shape[1] != 2 or len(p) < 2:
                raise ValueError("polylines need at least two 2-D points")
            if not np.all(np.isfinite(p)):
                raise ValueError("non-finite polyline coordinates")

    def __len__(self):
        return len(self.polylines)

    def segments(self):
        """Return ``(starts, ends, lane_index, half_width)`` for all segments."""
        if not self.polylines:
            empty = np.zeros((0, 2))
            return empty, empty, np.zeros(0, dtype=int), np.zeros(0)
        starts = np.concatenate([p[:-1] for p in self.polylines])
        ends = np.concatenate([p[1:] for p in self.polylines])
        lane = np.concatenate([np.full(len(p) - 1, i) for i, p in enumerate(self.polylines)])
        hw = np.asarray(self.half_widths)[lane]
        return starts, ends, lane, hw


@dataclass(frozen=True)
class KinematicLimits:
    a_max: float = 8.0
    yawrate_max: float = 1.5
    v_max: float = 35.0

    def __post_init__(self):
        if min(self.a_max, self.yawrate_max, self.v_max) <= 0:
            raise ValueError("kinematic limits must be positive")


@dataclass(frozen=True)
class ViolationRates:
    kin: float
    col: float
    off: float
    wro: float
    empty_map: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("kin", "col", "off", "wro"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} rate {val} outside [0, 1]")

    def as_dict(self) -> dict:
        return {"kin": self.kin, "col": self.col, "off": self.off, "wro": self.wro}


# --------------------------------------------------------------------------
# dynamics


def _unicycle_step(state, action, dt):
    x, y, v, th = (state[..., i] for i in range(4))
    acc, yaw = action[..., 0], action[..., 1]
    v_bar = v + 0.5 * acc * dt
    th_bar = th + 0.5 * yaw * dt
    out = np.empty(np.broadcast_shapes(state.shape, action.shape[:-1] + (4,)))
    out[..., 0] = x + v_bar * np.cos(th_bar) * dt
    out[..., 1] = y + v_bar * np.sin(th_bar) * dt
    out[..., 2] = v + acc * dt
    out[..., 3] = wrap_angle(th + yaw * dt)
    return out


def unicycle_rollout(s0, actions, dt: float = 0.1) -> np.ndarray:
    """Integrate constant-per-step controls under unicycle dynamics.

    Position is advanced with the trapezoidal speed ``v + a*dt/2`` along the
    midpoint heading ``theta + w*dt/2``, which is exact for straight
    constant-acceleration motion.

    Parameters
    ----------
    s0 : AgentState or array_like, shape (..., 4)
        Initial states.
    actions : array_like, shape (..., T, 2)
        Acceleration (m/s^2) and yaw rate (rad/s) per step.
    dt : float
        Step length in seconds.

    Returns
    -------
    ndarray, shape (..., T + 1, 4)
        The initial state followed by the ``T`` integrated states.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = s0.as_array() if isinstance(s0, AgentState) else np.asarray(s0, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if actions.shape[-1] != 2:
        raise ValueError("actions must have a trailing axis of size 2")
    lead = np.broadcast_shapes(s.shape[:-1], actions.shape[:-2])
    T = actions.shape[-2]
    out = np.empty(lead + (T + 1, 4))
    out[..., 0, :] = np.broadcast_to(s, lead + (4,))
    out[..., 0, 3] = wrap_angle(out[..., 0, 3])
    for k in range(T):
        out[..., k + 1, :] = _unicycle_step(out[..., k, :], actions[..., k, :], dt)
    return out


def unicycle_vjp(states, actions, grad_states, dt: float = 0.1) -> np.ndarray:
    """Pull a gradient on rollout states back onto the actions.

    ``states`` must be the output of :func:`unicycle_rollout` for ``actions``.
    ``grad_states`` has the same shape as ``states``; the slot for the
    initial state is ignored since it does not depend on the actions.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    g = np.asarray(grad_states, dtype=float)
    T = actions.shape[-2]
    gx, gy = g[..., T, 0].copy(), g[..., T, 1].copy()
    gv, gth = g[..., T, 2].copy(), g[..., T, 3].copy()
    out = np.zeros(np.broadcast_shapes(actions.shape, states.shape[:-2] + (T, 2)))
    for k in range(T - 1, -1, -1):
        s = states[..., k, :]
        acc, yaw = actions[..., k, 0], actions[..., k, 1]
        v_bar = s[..., 2] + 0.5 * acc * dt
        th_bar = s[..., 3] + 0.5 * yaw * dt
        c, sn = np.cos(th_bar), np.sin(th_bar)
        g_vbar = (gx * c + gy * sn) * dt
        g_thbar = (-gx * sn + gy * c) * v_bar * dt
        out[..., k, 0] = gv * dt + 0.5 * dt * g_vbar
        out[..., k, 1] = gth * dt + 0.5 * dt * g_thbar
        # adjoint of state k; x and y pass straight through
        gv = gv + g_vbar
        gth = gth + g_thbar
        if k > 0:
            gx = gx + g[..., k, 0]
            gy = gy + g[..., k, 1]
            gv = gv + g[..., k, 2]
            gth = gth + g[..., k, 3]
    return out


def actions_from_states(states, dt: float = 0.1) -> np.ndarray:
    """Finite-difference controls that reproduce speeds and headings exactly."""
    states = np.asarray(states, dtype=float)
    acc = np.diff(states[..., 2], axis=-1) / dt
    yaw = wrap_angle(np.diff(states[..., 3], axis=-1)) / dt
    return np.stack([acc, yaw], axis=-1)


# --------------------------------------------------------------------------
# violations


def box_corners(states, footprints) -> np.ndarray:
    """Corners of oriented rectangles, shape ``states.shape[:-1] + (4, 2)``."""
    states = np.asarray(states, dtype=float)
    fp = np.asarray(footprints, dtype=float)
    half_l = fp[..., 0] / 2.0
    half_w = fp[..., 1] / 2.0
    # footprints are per agent; broadcast along time
    while half_l.ndim < states.ndim - 1:
        half_l, half_w = half_l[..., None], half_w[..., None]
    c, s = np.cos(states[..., 3]), np.sin(states[..., 3])
    local = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=float)
    lx = local[:, 0] * half_l[..., None]
    ly = local[:, 1] * half_w[..., None]
    cx = states[..., 0, None] + c[..., None] * lx - s[..., None] * ly
    cy = states[..., 1, None] + s[..., None] * lx + c[..., None] * ly
    return np.stack([cx, cy], axis=-1)


def boxes_overlap(corners_a, corners_b) -> np.ndarray:
    """Separating-axis test for batches of convex quadrilaterals.

    Touching boxes do not count as overlapping.
    """
    a = np.asarray(corners_a, dtype=float)
    b = np.asarray(corners_b, dtype=float)
    overlap = np.ones(np.broadcast_shapes(a.shape[:-2], b.shape[:-2]), dtype=bool)
    for poly in (a, b):
        for e in range(2):
            edge = poly[..., e + 1, :] - poly[..., e, :]
            axis = np.stack([-edge[..., 1], edge[..., 0]], axis=-1)
            pa = np.einsum("...kd,...d->...k", a, axis)
            pb = np.einsum("...kd,...d->...k", b, axis)
            sep = (pa.max(-1) <= pb.min(-1)) | (pb.max(-1) <= pa.min(-1))
            overlap &= ~sep
    return overlap


def collision_matrix(states, footprints) -> np.ndarray:
    """Boolean ``(A, T)`` array: agent overlaps any other agent at that step."""
    states = np.asarray(states, dtype=float)
    A = states.shape[0]
    hit = np.zeros(states.shape[:2], dtype=bool)
    if A < 2:
        return hit
    corners = box_corners(states, footprints)
    ii, jj = np.triu_indices(A, k=1)
    pair_hit = boxes_overlap(corners[ii], corners[jj])
    np.logical_or.at(hit, ii, pair_hit)
    np.logical_or.at(hit, jj, pair_hit)
    return hit


def _nearest_lane(points, lane_map: LaneMap):
    """Distance to, half-width of, and direction of the nearest lane segment."""
    starts, ends, _, hw = lane_map.segments()
    dx, dy = ends[:, 0] - starts[:, 0], ends[:, 1] - starts[:, 1]
    seg_len2 = np.maximum(dx * dx + dy * dy, 1e-18)
    rx = points[:, 0, None] - starts[None, :, 0]
    ry = points[:, 1, None] - starts[None, :, 1]
    u = np.clip((rx * dx + ry * dy) / seg_len2, 0.0, 1.0)
    ex, ey = rx - u * dx, ry - u * dy
    d2 = ex * ex + ey * ey
    best = np.argmin(d2, axis=1)
    rows = np.arange(len(points))
    heading = np.arctan2(dy[best], dx[best])
    return np.sqrt(d2[rows, best]), hw[best], heading


def violation_flags(states, footprints=None, lane_map: LaneMap | None = None,
                    limits: KinematicLimits | None = None, dt: float = 0.1) -> dict:
    """Per-(agent, timestep) boolean violation flags.

    ``kin`` flags are attached to the state reached by the offending control,
    so every array has shape ``(A, T + 1)``.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 3 or states.shape[-1] != 4:
        raise ValueError("states must have shape (A, T + 1, 4)")
    A, Tp1 = states.shape[:2]
    limits = limits or KinematicLimits()
    if footprints is None:
        footprints = np.tile(DEFAULT_FOOTPRINT, (A, 1))
    footprints = np.asarray(footprints, dtype=float)
    if footprints.shape != (A, 2):
        raise ValueError("footprints must have shape (A, 2)")

    kin = np.zeros((A, Tp1), dtype=bool)
    kin |= np.abs(states[..., 2]) > limits.v_max
    if Tp1 > 1:
        ctrl = actions_from_states(states, dt)
        bad = (np.abs(ctrl[..., 0]) > limits.a_max) | (np.abs(ctrl[..., 1]) > limits.yawrate_max)
        kin[:, 1:] |= bad

    col = collision_matrix(states, footprints)

    empty = lane_map is None or len(lane_map) == 0
    if empty:
        off = np.zeros((A, Tp1), dtype=bool)
        wro = np.zeros((A, Tp1), dtype=bool)
    else:
        pts = states[..., :2].reshape(-1, 2)
        dist, hw, heading = _nearest_lane(pts, lane_map)
        off = (dist > hw).reshape(A, Tp1)
        diff = np.abs(wrap_angle(states[..., 3].reshape(-1) - heading))
        wro = (diff > np.pi / 2).reshape(A, Tp1)
    return {"kin": kin, "col": col, "off": off, "wro": wro, "empty_map": empty}


def violation_rates(states, footprints=None, lane_map: LaneMap | None = None,
                    limits: KinematicLimits | None = None, dt: float = 0.1,
                    per_timestep: bool = False) -> ViolationRates:
    """Fraction of agents with at least one violation of each kind.

    With ``per_timestep=True`` the rates are fractions of (agent, step)
    pairs instead.  An empty or missing map yields ``off = wro = 0`` and sets
    ``empty_map`` on the result.
    """
    flags = violation_flags(states, footprints, lane_map, limits, dt)
    reduce = (lambda f: float(f.mean())) if per_timestep else (lambda f: float(f.any(axis=1).mean()))
    return ViolationRates(
        kin=reduce(flags["kin"]),
        col=reduce(flags["col"]),
        off=reduce(flags["off"]),
        wro=reduce(flags["wro"]),
        empty_map=flags["empty_map"],
    )


# --------------------------------------------------------------------------
# scores


def quality_score(r: ViolationRates, floor: float | None = None) -> float:
    """Scalar plausibility ``1 - (0.20 kin + 0.45 col + 0.35 (off + wro) / 2)``.

    ``floor`` clamps the score from below, e.g. ``1e-6`` before the value is
    used as a DPP quality weight.
    """
    w_kin, w_int, w_map = RMM_WEIGHTS
    q = 1.0 - (w_kin * r.kin + w_int * r.col + w_map * (r.off + r.wro) / 2)
    if floor is not None:
        q = min(max(q, floor), 1.0)
    return q


def rmm_aggregate(kinematic: float, interactive: float, map_based: float) -> float:
    w_kin, w_int, w_map = RMM_WEIGHTS
    return w_kin * kinematic + w_int * interactive + w_map * map_based


def rmm_proxy(rates: Sequence[ViolationRates]) -> float:
    """Desk-scale realism aggregate over a set of rollouts.

    Buckets are ``1 - kin``, ``1 - col`` and ``1 - (off + wro) / 2`` averaged
    over rollouts.  This is a violation-based stand-in, not the likelihood
    based benchmark metric.
    """
    if not rates:
        raise ValueError("need at least one rollout")
    kin = np.mean([r.kin for r in rates])
    col = np.mean([r.col for r in rates])
    mp = np.mean([(r.off + r.wro) / 2 for r in rates])
    return float(rmm_aggregate(1 - kin, 1 - col, 1 - mp))


def minade(rollouts, gt) -> float:
    """Minimum over rollouts of the mean Euclidean position error.

    Parameters
    ----------
    rollouts : array_like, shape (R, A, T, >=2)
    gt : array_like, shape (A, T, >=2)
    """
    rollouts = np.asarray(rollouts, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if rollouts.ndim != 4 or rollouts.shape[0] == 0:
        raise ValueError("need a non-empty (R, A, T, D) rollout array")
    if rollouts.shape[1:3] != gt.shape[:2]:
        raise ValueError(f"rollout shape {rollouts.shape[1:3]} does not match gt {gt.shape[:2]}")
    err = np.linalg.norm(rollouts[..., :2] - gt[None, ..., :2], axis=-1)
    return float(err.mean(axis=(1, 2)).min())
