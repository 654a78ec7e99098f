"""Synthetic traffic scenes and their simulated LiDAR-like point streams.

Scenario JSON layout::

    {"format": "cascadesim-scenario", "version": 1, "seed": int, "dt": float,
     "horizon": int, "ego_index": int,
     "agents": [{"states": [[x, y, v, theta], ...],      # T_h + 1 history rows
                 "future": [[x, y, v, theta], ...],      # optional, T_f rows
                 "footprint": [length, width]}, ...],
     "map": {"polylines": [[[x, y], ...], ...], "half_widths": [float, ...]},
     "lights": [{"state": 0 | 1 | 2, "position": [x, y]}, ...],
     "posts": [[x, y], ...]}

Light states are 0 red, 1 yellow, 2 green.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .occupancy import EgoPose2D
from .traffic import DEFAULT_FOOTPRINT, LaneMap, wrap_angle

SCENARIO_FORMAT = "cascadesim-scenario"
SCENARIO_VERSION = 1
HISTORY_FRAMES = 10
TOPOLOGIES = ("straight", "curve", "intersection")
POINT_SPACING = 0.2
BOX_HEIGHTS = (0.2, 0.6, 1.0, 1.4)
POST_HEIGHTS = tuple(np.round(np.arange(0.1, 3.0, 0.2), 10))
PLACEMENT_HALF_EXTENT = 35.0
MIN_GAP = 15.0
STOP_LINE = 8.0
# car-following parameters: max accel, comfortable decel, headway, standstill gap
IDM = (1.5, 2.0, 1.2, 2.0)


@dataclass
class Scenario:
    """A multi-agent scene with history, optional ground-truth future and map."""

    history: np.ndarray
    lane_map: LaneMap
    footprints: np.ndarray | None = None
    future: np.ndarray | None = None
    lights: list = field(default_factory=list)
    posts: np.ndarray | None = None
    ego_index: int = 0
    horizon: int = 80
    dt: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=float)
        if self.history.ndim != 3 or self.history.shape[-1] != 4 or self.history.shape[0] < 1:
            raise ValueError("history must have shape (A >= 1, T_h + 1, 4)")
        if not np.all(np.isfinite(self.history)):
            raise ValueError("history has non-finite states")
        A = self.history.shape[0]
        if self.footprints is None:
            self.footprints = np.tile(DEFAULT_FOOTPRINT, (A, 1))
        self.footprints = np.asarray(self.footprints, dtype=float)
        if self.footprints.shape != (A, 2) or np.any(self.footprints <= 0):
            raise ValueError("footprints must be positive with shape (A, 2)")
        if self.future is not None:
            self.future = np.asarray(self.future, dtype=float)
            if self.future.ndim != 3 or self.future.shape[0] != A or self.future.shape[2] != 4:
                raise ValueError("future must have shape (A, T_f, 4)")
        self.posts = np.zeros((0, 2)) if self.posts is None else np.asarray(self.posts, dtype=float).reshape(-1, 2)
        if not 0 <= self.ego_index < A:
            raise ValueError(f"ego_index {self.ego_index} outside [0, {A})")
        if self.horizon < 1 or self.dt <= 0:
            raise ValueError("horizon and dt must be positive")
        for light in self.lights:
            if int(light["state"]) not in (0, 1, 2) or len(light["position"]) != 2:
                raise ValueError(f"malformed traffic light {light}")

    @property
    def n_agents(self) -> int:
        return self.history.shape[0]

    @property
    def history_len(self) -> int:
        return self.history.shape[1]

    @property
    def current(self) -> np.ndarray:
        return self.history[:, -1]

    def ego_pose(self, states: np.ndarray) -> EgoPose2D:
        s = states[self.ego_index]
        return EgoPose2D(float(s[0]), float(s[1]), float(s[3]))

    def with_history(self, history, future=None) -> "Scenario":
        return Scenario(history, self.lane_map, self.footprints, future, list(self.lights),
                        self.posts, self.ego_index, self.horizon, self.dt, self.seed)

    def point_stream(self) -> list:
        """Points (ego frame) for every history frame."""
        return [emit_points(self.history[:, f], self.footprints, self.posts, self.ego_index)
                for f in range(self.history_len)]


# --------------------------------------------------------------------------
# point emission


def rectangle_boundary(center, heading, length, width, spacing=POINT_SPACING) -> np.ndarray:
    """Points on the perimeter of an oriented rectangle, in world coordinates."""
    hl, hw = 0.5 * length, 0.5 * width
    corners = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    pts = []
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        n = max(int(np.ceil(np.linalg.norm(b - a) / spacing)), 1)
        f = np.arange(n)[:, None] / n
        pts.append(a + f * (b - a))
    local = np.vstack(pts)
    c, s = np.cos(heading), np.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center, dtype=float)


def world_to_ego(xy, pose: EgoPose2D) -> np.ndarray:
    c, s = np.cos(pose.heading), np.sin(pose.heading)
    d = np.asarray(xy, dtype=float) - np.array([pose.x, pose.y])
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def emit_points(states, footprints, posts, ego_index: int, with_labels: bool = False):
    """Synthetic returns from other agents' box sides and roadside posts.

    Points are ``(x, y, z)`` in the ego frame.  With ``with_labels`` the
    emitting agent index is also returned (``-1`` for posts).
    """
    states = np.asarray(states, dtype=float)
    ego = states[ego_index]
    pose = EgoPose2D(float(ego[0]), float(ego[1]), float(ego[3]))
    xy_parts, labels = [], []
    for a in range(len(states)):
        if a == ego_index:
            continue
        ring = rectangle_boundary(states[a, :2], states[a, 3], *footprints[a])
        xy_parts.append(ring)
        labels.append(np.full(len(ring), a))
    pts, lab = [], []
    for ring, l in zip(xy_parts, labels):
        local = world_to_ego(ring, pose)
        for z in BOX_HEIGHTS:
            pts.append(np.column_stack([local, np.full(len(local), z)]))
            lab.append(l)
    posts = np.asarray(posts, dtype=float).reshape(-1, 2)
    if len(posts):
        local = world_to_ego(posts, pose)
        for z in POST_HEIGHTS:
            pts.append(np.column_stack([local, np.full(len(local), z)]))
            lab.append(np.full(len(local), -1))
    out = np.vstack(pts) if pts else np.zeros((0, 3))
    if with_labels:
        return out, (np.concatenate(lab) if lab else np.zeros(0, dtype=int))
    return out


# --------------------------------------------------------------------------
# synthesis


def _offset(center: np.ndarray, d: float) -> np.ndarray:
    """Shift a polyline sideways by ``d`` (positive to the left)."""
    tang = np.gradient(center, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    return center + d * np.column_stack([-tang[:, 1], tang[:, 0]])


def _lane_geometry(topology: str):
    hw = 1.75
    if topology == "straight":
        xs = np.linspace(-150.0, 150.0, 31)
        lanes = [np.column_stack([xs, np.full_like(xs, -hw)]),
                 np.column_stack([xs[::-1], np.full_like(xs, hw)])]
    elif topology == "curve":
        # straight lead-in, quarter turn of radius 40 centred on (0, 40), straight lead-out
        R = 40.0
        ang = np.linspace(-np.pi / 2, 0.0, 49)
        lead_in = np.column_stack([np.linspace(-150.0, 0.0, 16)[:-1], np.zeros(15)])
        arc = np.column_stack([R * np.cos(ang), R + R * np.sin(ang)])
        lead_out = np.column_stack([np.full(15, R), np.linspace(R, 190.0, 16)[1:]])
        center = np.vstack([lead_in, arc, lead_out])
        lanes = [_offset(center, -hw), _offset(center, hw)[::-1]]
    elif topology == "intersection":
        s = np.linspace(-150.0, 150.0, 31)
        lanes = [np.column_stack([s, np.full_like(s, -hw)]),
                 np.column_stack([s[::-1], np.full_like(s, hw)]),
                 np.column_stack([np.full_like(s, hw), s]),
                 np.column_stack([np.full_like(s, -hw), s[::-1]])]
    else:
        raise ValueError(f"unknown topology {topology!r}; choose from {TOPOLOGIES}")
    return LaneMap(lanes, [hw] * len(lanes))


def lane_point(line: np.ndarray, s):
    """Position and heading at arc length ``s``, extrapolating past the ends."""
    seg = np.diff(line, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.atleast_1d(np.asarray(s, dtype=float))
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    u = (s - cum[idx]) / seg_len[idx]
    xy = line[idx] + u[:, None] * seg[idx]
    heading = np.arctan2(seg[idx, 1], seg[idx, 0])
    return xy, heading


def _slots(lane_map: LaneMap, topology: str):
    slots = []
    for li, line in enumerate(lane_map.polylines):
        total = _lane_length(line)
        s_vals = np.arange(0.0, total, MIN_GAP)
        xy, _ = lane_point(line, s_vals)
        ok = np.all(np.abs(xy) <= PLACEMENT_HALF_EXTENT, axis=1)
        if topology == "intersection":
            ok &= np.linalg.norm(xy, axis=1) > 8.0
        slots.extend((li, float(s)) for s in s_vals[ok])
    return slots


def _lane_length(line: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(line, axis=0), axis=1)))


def car_following(s0, v0, v_des, lengths, leaders, stops, steps: int, dt: float) -> tuple:
    """Longitudinal positions and speeds under the intelligent driver model.

    ``leaders[i]`` is the index of the vehicle ahead on the same lane (or
    -1); ``stops[i]`` is an arc length to halt before (``inf`` when free).
    Returns arrays of shape ``(N, steps)`` for times ``dt .. steps * dt``.
    """
    a_max, b, headway, gap0 = IDM
    s = np.asarray(s0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    out_s, out_v = np.zeros((len(s), steps)), np.zeros((len(s), steps))
    for k in range(steps):
        acc = np.empty(len(s))
        for i in range(len(s)):
            free = 1.0 - (v[i] / max(v_des[i], 0.1)) ** 4
            gap, dv = np.inf, 0.0
            if leaders[i] >= 0:
                j = leaders[i]
                gap = s[j] - s[i] - 0.5 * (lengths[i] + lengths[j])
                dv = v[i] - v[j]
            if stops[i] - s[i] - 0.5 * lengths[i] < gap:
                gap, dv = stops[i] - s[i] - 0.5 * lengths[i], v[i]
            inter = 0.0
            if np.isfinite(gap):
                want = gap0 + v[i] * headway + v[i] * dv / (2.0 * np.sqrt(a_max * b))
                inter = (max(want, 0.0) / max(gap, 0.1)) ** 2
            acc[i] = np.clip(a_max * (free - inter), -6.0, a_max)
        v_new = np.maximum(v + acc * dt, 0.0)
        s = s + 0.5 * (v + v_new) * dt
        v = v_new
        out_s[:, k], out_v[:, k] = s, v
    return out_s, out_v


def synth_scenario(seed: int = 0, n_agents: int = 4, topology: str = "straight",
                   speed_range: tuple = (4.0, 12.0), horizon: int = 80, dt: float = 0.1,
                   history_frames: int = HISTORY_FRAMES, stationary: bool = False) -> Scenario:
    """Agents on lanes with constant-speed histories and car-following futures.

    Each agent cruises towards a desired speed near its current one while
    keeping a safe gap to the vehicle ahead.  At intersections the
    east-west lanes have green lights and the north-south lanes stop at a
    red light.  ``stationary=True`` parks every agent.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be at least 1")
    lo, hi = speed_range
    if lo < 0 or hi < lo:
        raise ValueError("speed_range must satisfy 0 <= low <= high")
    rng = np.random.default_rng(seed)
    lane_map = _lane_geometry(topology)
    slots = _slots(lane_map, topology)
    if n_agents > len(slots):
        raise ValueError(f"{n_agents} agents exceed lane capacity of {len(slots)} slots")
    # ego takes the lane-0 slot closest to the origin
    lane0 = [i for i, (li, _) in enumerate(slots) if li == 0]
    dists = [np.linalg.norm(lane_point(lane_map.polylines[0], slots[i][1])[0]) for i in lane0]
    ego_slot = lane0[int(np.argmin(dists))]
    rest = [i for i in range(len(slots)) if i != ego_slot]
    chosen = [ego_slot] + [int(c) for c in rng.choice(rest, size=n_agents - 1, replace=False)]

    lane_of = np.array([slots[c][0] for c in chosen])
    s0 = np.array([slots[c][1] for c in chosen])
    if stationary:
        v0 = np.zeros(n_agents)
        v_des = np.zeros(n_agents)
    else:
        v0 = rng.uniform(lo, hi, size=n_agents)
        v_des = v0 * rng.uniform(0.8, 1.2, size=n_agents)
    footprints = np.tile(DEFAULT_FOOTPRINT, (n_agents, 1))
    leaders = np.full(n_agents, -1)
    for i in range(n_agents):
        ahead = [j for j in range(n_agents) if lane_of[j] == lane_of[i] and s0[j] > s0[i]]
        if ahead:
            leaders[i] = min(ahead, key=lambda j: s0[j])
    stops = np.full(n_agents, np.inf)
    if topology == "intersection":
        for i in range(n_agents):
            line = lane_map.polylines[lane_of[i]]
            s_stop = 0.5 * _lane_length(line) - STOP_LINE
            if lane_of[i] >= 2 and s0[i] < s_stop:
                stops[i] = s_stop
                # approach slowly enough to brake comfortably before the line
                room = max(s_stop - s0[i] - 0.5 * footprints[i, 0], 0.0)
                v0[i] = min(v0[i], np.sqrt(2.0 * IDM[1] * room))

    hist_t = (np.arange(history_frames + 1) - history_frames) * dt
    history = np.zeros((n_agents, history_frames + 1, 4))
    future = np.zeros((n_agents, horizon, 4))
    if stationary:
        fut_s, fut_v = np.repeat(s0[:, None], horizon, 1), np.zeros((n_agents, horizon))
    else:
        fut_s, fut_v = car_following(s0, v0, v_des, footprints[:, 0], leaders, stops, horizon, dt)
    for a in range(n_agents):
        line = lane_map.polylines[lane_of[a]]
        xy, hd = lane_point(line, s0[a] + v0[a] * hist_t)
        history[a] = np.column_stack([xy, np.full(len(hist_t), v0[a]), hd])
        xy, hd = lane_point(line, fut_s[a])
        future[a] = np.column_stack([xy, fut_v[a], hd])
    history[..., 3] = wrap_angle(history[..., 3])
    future[..., 3] = wrap_angle(future[..., 3])

    posts = []
    for line, hw in zip(lane_map.polylines, lane_map.half_widths):
        total = _lane_length(line)
        xy, hd = lane_point(line, np.arange(0.0, total, 15.0))
        right = np.column_stack([np.sin(hd), -np.cos(hd)])
        p = xy + (hw + 1.5) * right
        posts.append(p[np.all(np.abs(p) <= 38.0, axis=1)])
    posts = np.vstack(posts)
    lights = []
    if topology == "intersection":
        for pos, state in (([-6.0, -3.5], 2), ([6.0, 3.5], 2), ([3.5, -6.0], 0), ([-3.5, 6.0], 0)):
            lights.append({"state": state, "position": pos})
    return Scenario(history, lane_map, None, future, lights, posts, 0, horizon, dt, seed)


# --------------------------------------------------------------------------
# JSON


def scenario_to_dict(sc: Scenario) -> dict:
    agents = []
    for a in range(sc.n_agents):
        entry = {"states": sc.history[a].tolist(), "footprint": sc.footprints[a].tolist()}
        if sc.future is not None:
            entry["future"] = sc.future[a].tolist()
        agents.append(entry)
    return {
        "format": SCENARIO_FORMAT, "version": SCENARIO_VERSION, "seed": int(sc.seed),
        "dt": float(sc.dt), "horizon": int(sc.horizon), "ego_index": int(sc.ego_index),
        "agents": agents,
        "map": {"polylines": [p.tolist() for p in sc.lane_map.polylines],
                "half_widths": list(sc.lane_map.half_widths)},
        "lights": [{"state": int(l["state"]), "position": [float(v) for v in l["position"]]}
                   for l in sc.lights],
        "posts": sc.posts.tolist(),
    }


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("format") != SCENARIO_FORMAT:
        raise ValueError(f"field 'format': expected {SCENARIO_FORMAT!r}")
    if d.get("version") != SCENARIO_VERSION:
        raise ValueError(f"field 'version': unsupported {d.get('version')!r}")
    try:
        agents = d["agents"]
        if not agents:
            raise ValueError("field 'agents': at least one agent is required")
        lengths = {len(a["states"]) for a in agents}
        if len(lengths) != 1:
            raise ValueError("field 'agents': history lengths differ")
        history = np.array([a["states"] for a in agents], dtype=float)
        footprints = np.array([a.get("footprint", DEFAULT_FOOTPRINT) for a in agents], dtype=float)
        future = None
        if all("future" in a for a in agents):
            future = np.array([a["future"] for a in agents], dtype=float)
        lane_map = LaneMap(d["map"]["polylines"], d["map"]["half_widths"])
        return Scenario(history, lane_map, footprints, future, list(d.get("lights", [])),
                        np.array(d.get("posts", []), dtype=float), int(d.get("ego_index", 0)),
                        int(d.get("horizon", 80)), float(d.get("dt", 0.1)), int(d.get("seed", 0)))
    except KeyError as exc:
        raise ValueError(f"missing field {exc}") from None


def dumps_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), sort_keys=True)


def loads_scenario(text: str) -> Scenario:
    return scenario_from_dict(json.loads(text))
