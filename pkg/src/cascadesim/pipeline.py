"""Training, cascaded inference and closed-loop simulation.

World rollouts come from the rectified-flow sampler over latent occupancy;
every world rollout conditions a batch of motion samples from the reverse
diffusion sampler.  ``n`` world rollouts with ``m`` motions each yield
``n * m`` joint trajectories.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .conditioning import PoolerParams, attention_pool, build_step_conditions, toy_scene_encode
from .diffusion import (DenoiserSpec, LinearConditionalDenoiser, NoiseSchedule, denoiser_rows,
                        forward_noise, sample_motions_guided)
from .dpp import GuidanceSchedule, as_schedule
from .flow import (FlowBatch, FlowSamplerConfig, VelocityFieldSpec, WorldCondition,
                   candidate_seeds, fit_linear_velocity, sample_flow_guided)
from .occupancy import (EgoPose2D, GridConfig, LatentGrid, OccupancyGrid, encode_latent,
                        latent_frechet, transition_map, voxelize, warp_occupancy, weight_map)
from .scenario import Scenario, emit_points
from .traffic import (actions_from_states, minade, quality_score, rmm_proxy, unicycle_rollout,
                      unicycle_vjp, violation_rates)

log = logging.getLogger("cascadesim")

ROLLOUT_FORMAT = "cascadesim-rollouts"
ROLLOUT_VERSION = 1


# --------------------------------------------------------------------------
# observation


@dataclass(frozen=True)
class Frame:
    grid: OccupancyGrid
    mask: object
    pose: EgoPose2D
    latent: LatentGrid


def observe(states_seq: np.ndarray, scenario: Scenario, grid: GridConfig, t0: int = 0) -> list:
    """Voxelize and encode the point stream of a state sequence ``(A, F, 4)``."""
    frames = []
    for f in range(states_seq.shape[1]):
        st = states_seq[:, f]
        occ, mask = voxelize(emit_points(st, scenario.footprints, scenario.posts,
                                         scenario.ego_index), grid)
        frames.append(Frame(occ, mask, scenario.ego_pose(st), encode_latent(occ, grid, t0 + f)))
    return frames


def world_condition(frames: list) -> WorldCondition:
    return WorldCondition([f.latent for f in frames], [f.pose for f in frames])


def motion_weight_maps(frames: list, lam: float, delta: int, grid: GridConfig,
                       start: int) -> np.ndarray:
    """Weight maps for frames ``start ..``; each compares a frame with the warped
    frame ``delta`` steps earlier."""
    maps = []
    for j in range(start, len(frames)):
        prev = frames[max(j - delta, 0)]
        cur = frames[j]
        yw, mw = warp_occupancy(prev.grid, prev.mask, prev.pose, cur.pose)
        c = transition_map(cur.grid, cur.mask, yw, mw, delta)
        maps.append(weight_map(c, lam, grid).data)
    return np.stack(maps)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lam: float = 0.2
    delta: int = 1
    stride: int = 10
    kf: int = 50
    flow_bins: int = 8
    denoiser_bins: int = 4
    t_draws: int = 8
    k_draws: int = 16
    dim: int = 32
    ridge: float = 1e-6
    flow_steps: int = 20
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if min(self.delta, self.stride, self.kf, self.flow_bins, self.denoiser_bins,
               self.t_draws, self.k_draws, self.dim, self.flow_steps) < 1:
            raise ValueError("integer settings must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("lam", "delta", "stride", "kf", "flow_bins",
                                           "denoiser_bins", "t_draws", "k_draws", "dim",
                                           "ridge", "flow_steps", "seed")}
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        grid = GridConfig.from_dict(d.pop("grid"))
        return cls(grid=grid, **d)


@dataclass
class ModelBundle:
    velocity: VelocityFieldSpec
    denoiser: DenoiserSpec
    pooler: PoolerParams
    noise: NoiseSchedule
    config: TrainConfig

    def __post_init__(self):
        H, W, C = self.config.grid.latent_dims
        if self.velocity.kind == "linear_per_bin":
            if tuple(int(v) for v in self.velocity.params["latent_dims"]) != (H, W, C):
                raise ValueError("velocity field and grid disagree on latent dims")
        if self.pooler.proj_in.shape[0] != H * W * C:
            raise ValueError("pooler projection does not match the latent size")
        if self.pooler.dim != self.config.dim:
            raise ValueError("pooler width does not match the configured dim")
        if self.noise.num_steps != self.config.kf:
            raise ValueError("noise schedule length does not match kf")

    @property
    def horizon(self) -> int:
        return int(self.velocity.params["horizon"])

    @property
    def history_len(self) -> int:
        return int(self.velocity.params["history_len"])


def _training_frames(sc: Scenario, grid: GridConfig):
    if sc.future is None:
        raise ValueError("training scenarios need a ground-truth future")
    seq = np.concatenate([sc.history, sc.future], axis=1)
    return observe(seq, sc, grid)


def train_toy(scenarios, cfg: TrainConfig | None = None) -> ModelBundle:
    """Fit the world and motion models on scenarios with known futures.

    Weight maps come from voxel transitions between consecutive observed
    frames.  The velocity field is fitted on stratified flow times; the
    denoiser is fitted on conditions built from one sampled world rollout
    per scene.
    """
    cfg = cfg or TrainConfig()
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("training set is empty")
    horizons = {sc.future.shape[1] if sc.future is not None else None for sc in scenarios}
    hist_lens = {sc.history_len for sc in scenarios}
    if len(horizons) != 1 or None in horizons or len(hist_lens) != 1:
        raise ValueError("training scenarios need futures and equal history and horizon lengths")
    grid = cfg.grid
    rng = np.random.default_rng(cfg.seed)
    Th1 = hist_lens.pop()

    frames_all, z0s, targets, ts, conds, weights = [], [], [], [], [], []
    for sc in scenarios:
        frames = _training_frames(sc, grid)
        frames_all.append(frames)
        cond = world_condition(frames[:Th1])
        target = np.stack([f.latent.data for f in frames[Th1:]])
        wmap = motion_weight_maps(frames, cfg.lam, cfg.delta, grid, Th1)
        for j in range(cfg.t_draws):
            ts.append((j + rng.uniform()) / cfg.t_draws)
            z0s.append(rng.standard_normal(target.shape))
            targets.append(target)
            conds.append(cond)
            weights.append(wmap)
    weights = np.stack(weights)
    if np.allclose(weights, 1.0, rtol=0, atol=1e-12):
        log.info("no occupancy transitions in the training set; using uniform weights")
    batch = FlowBatch(np.stack(z0s), np.stack(targets), np.array(ts), conds, weights)
    velocity = fit_linear_velocity(batch, bins=cfg.flow_bins, ridge=cfg.ridge)

    H, W, C = grid.latent_dims
    pooler = PoolerParams.seeded(H * W * C, cfg.dim, 1, cfg.stride, cfg.seed)
    noise = NoiseSchedule.linear(cfg.kf)
    est = LinearConditionalDenoiser(schedule=noise, n_bins=cfg.denoiser_bins, ridge=cfg.ridge)
    flow_cfg = FlowSamplerConfig(cfg.flow_steps, 0, GuidanceSchedule(0.0), velocity.event_shape[0])
    for s_idx, (sc, frames) in enumerate(zip(scenarios, frames_all)):
        flow_cfg.seed = int(rng.integers(2 ** 31))
        cond = world_condition(frames[:Th1])
        rollout = sample_flow_guided(velocity, cond, 1, flow_cfg)[0]
        cset = _conditions_for(rollout, sc, pooler, cfg.dim)
        tau0 = actions_from_states(np.concatenate([sc.current[:, None], sc.future], axis=1), sc.dt)
        rows = cset.conditions[:, : sc.n_agents]
        K = noise.num_steps
        for j in range(cfg.k_draws):
            k = 1 + min(int((j + rng.uniform()) * K / cfg.k_draws), K - 1)
            tk = forward_noise(tau0, k, noise, rng).actions
            c_clean, c_noisy = noise.posterior_coefs(k)
            X = denoiser_rows(tk, rows)
            X = np.hstack([np.full((len(X), 1), float(k)), X])
            y = (c_clean * tau0 + c_noisy * tk).reshape(-1, 2)
            est.partial_fit(X, y)
    denoiser = DenoiserSpec("linear_conditional",
                            {"coef": est.coef_, "n_bins": est.n_bins})
    return ModelBundle(velocity, denoiser, pooler, noise, cfg)


def _conditions_for(rollout: np.ndarray, sc: Scenario, pooler: PoolerParams, dim: int):
    lat = [LatentGrid(z, t) for t, z in enumerate(rollout)]
    g = attention_pool(lat, pooler)
    return build_step_conditions(lat, g, toy_scene_encode(sc, dim), pooler)


# --------------------------------------------------------------------------
# inference


class UnicycleEmbedding:
    """Embed action trajectories by their integrated positions relative to the start."""

    def __init__(self, s0: np.ndarray, dt: float):
        self.s0 = np.asarray(s0, dtype=float)
        self.dt = dt

    def __call__(self, tau):
        states = unicycle_rollout(self.s0, tau, self.dt)
        pos = states[..., 1:, :2] - states[..., :1, :2]
        return pos.reshape(len(tau), -1)

    def vjp(self, tau, grad_emb):
        states = unicycle_rollout(self.s0, tau, self.dt)
        g = np.zeros_like(states)
        g[..., 1:, :2] = np.asarray(grad_emb).reshape(states[..., 1:, :2].shape)
        return unicycle_vjp(states, tau, g, self.dt)


def motion_quality_fn(sc: Scenario):
    def q(tau):
        states = unicycle_rollout(sc.current, tau, sc.dt)
        return quality_score(violation_rates(states, sc.footprints, sc.lane_map, dt=sc.dt))
    return q


def world_quality_fn(history_latents):
    def q(z):
        return float(np.exp(-latent_frechet(list(z), history_latents)))
    return q


@dataclass
class RolloutSet:
    """``states`` is ``(n * m, A, T + 1, 4)`` including the starting state."""

    states: np.ndarray
    actions: np.ndarray
    provenance: list
    n: int
    m: int
    dt: float = 0.1
    metrics: dict | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        self.provenance = [tuple(int(v) for v in p) for p in self.provenance]
        if len(self.states) != self.n * self.m or len(self.provenance) != self.n * self.m:
            raise ValueError("a rollout set holds exactly n * m entries")
        if len(set(self.provenance)) != len(self.provenance):
            raise ValueError("provenance entries must be unique")
        if self.states.ndim != 4 or self.states.shape[-1] != 4:
            raise ValueError("states must be (n * m, A, T + 1, 4)")

    def __len__(self):
        return len(self.states)

    @property
    def horizon(self) -> int:
        return self.states.shape[2] - 1


def _stage_seeds(seed: int, n: int) -> tuple:
    """World-stage seed and one motion-stage seed per world rollout."""
    world, *motion = candidate_seeds(seed, n + 1)
    return world, motion


def cascaded_inference(scenario: Scenario, models: ModelBundle, n: int = 4, m: int = 8,
                       guidance_world=None, guidance_motion=None, seed: int = 0,
                       frames: list | None = None) -> RolloutSet:
    """Sample ``n`` world rollouts, then ``m`` motions per rollout."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be at least 1")
    if scenario.history_len != models.history_len:
        raise ValueError(f"scenario history has {scenario.history_len} frames, "
                         f"models expect {models.history_len}")
    gw, gm = as_schedule(guidance_world), as_schedule(guidance_motion)
    frames = frames or observe(scenario.history, scenario, models.config.grid)
    cond = world_condition(frames)
    hist_lat = [f.latent for f in frames]
    world_seed, motion_seeds = _stage_seeds(seed, n)
    flow_cfg = FlowSamplerConfig(models.config.flow_steps, world_seed, gw, models.horizon)
    worlds = sample_flow_guided(models.velocity, cond, n, flow_cfg,
                                quality_fn=world_quality_fn(hist_lat))
    A, T = scenario.n_agents, models.horizon
    emb = UnicycleEmbedding(scenario.current, scenario.dt)
    qfn = motion_quality_fn(scenario)
    states, actions, prov = [], [], []
    for i in range(n):
        cset = _conditions_for(worlds[i], scenario, models.pooler, models.config.dim)
        tau = sample_motions_guided(models.denoiser, cset, m, models.noise, gm, qfn,
                                    seed=motion_seeds[i], shape=(A, T, 2), embedding=emb)
        states.append(unicycle_rollout(scenario.current, tau, scenario.dt))
        actions.append(tau)
        prov.extend((i, j) for j in range(m))
    return RolloutSet(np.concatenate(states), np.concatenate(actions), prov, n, m, scenario.dt)


def select_rollout(states: np.ndarray, scenario: Scenario, selection: str = "best_Q") -> int:
    """Index of the rollout to commit: highest quality (first on ties) or the first."""
    if selection == "first":
        return 0
    if selection != "best_Q":
        raise ValueError(f"unknown selection policy {selection!r}")
    scores = [quality_score(violation_rates(s, scenario.footprints, scenario.lane_map,
                                            dt=scenario.dt)) for s in states]
    return int(np.argmax(scores))


@dataclass
class ClosedLoopTrace:
    """``states`` is ``(A, total + 1, 4)`` starting at the initial state."""

    states: np.ndarray
    actions: np.ndarray
    logs: list

    @property
    def committed(self) -> np.ndarray:
        return self.states[:, 1:]


def closed_loop_simulate(scenario: Scenario, models: ModelBundle, replan_hz: int = 1,
                         sim_hz: int = 10, total_s: float = 8.0, n: int = 4, m: int = 8,
                         selection: str = "best_Q", guidance_world=None, guidance_motion=None,
                         seed: int = 0) -> ClosedLoopTrace:
    """Receding-horizon execution with periodic replanning.

    At every replan the cascade runs from the current joint state, one
    rollout is selected, and its first ``sim_hz // replan_hz`` controls are
    executed for all agents.  Observations are regenerated at the committed
    states.
    """
    if replan_hz < 1 or sim_hz < 1 or sim_hz % replan_hz:
        raise ValueError("sim_hz must be a positive multiple of replan_hz")
    if abs(1.0 / sim_hz - scenario.dt) > 1e-12:
        raise ValueError(f"sim_hz {sim_hz} does not match the scenario step {scenario.dt}")
    per_plan = sim_hz // replan_hz
    total = int(round(total_s * sim_hz))
    if per_plan > models.horizon:
        raise ValueError("replan interval exceeds the model horizon")
    sc = scenario
    states = [sc.current[:, None]]
    actions, logs = [], []
    done, r = 0, 0
    plan_seeds = candidate_seeds(seed, int(np.ceil(total / per_plan)))
    while done < total:
        rs = cascaded_inference(sc, models, n, m, guidance_world, guidance_motion, plan_seeds[r])
        idx = select_rollout(rs.states, sc, selection)
        k = min(per_plan, total - done)
        act = rs.actions[idx][:, :k]
        seg = unicycle_rollout(sc.current, act, sc.dt)
        states.append(seg[:, 1:])
        actions.append(act)
        q = quality_score(violation_rates(rs.states[idx], sc.footprints, sc.lane_map, dt=sc.dt))
        logs.append({"replan": r, "step": done, "selected": list(rs.provenance[idx]), "Q": q})
        hist = np.concatenate([sc.history, seg[:, 1:]], axis=1)[:, -sc.history_len:]
        sc = sc.with_history(hist)
        done += k
        r += 1
    return ClosedLoopTrace(np.concatenate(states, axis=1), np.concatenate(actions, axis=1), logs)


# --------------------------------------------------------------------------
# metrics and files


def evaluate_rollouts(rs: RolloutSet, scenario: Scenario) -> dict:
    """Per-rollout violation rates and quality plus aggregate realism and minADE."""
    per = []
    rates = []
    for s, (i, j) in zip(rs.states, rs.provenance):
        r = violation_rates(s, scenario.footprints, scenario.lane_map, dt=rs.dt)
        rates.append(r)
        per.append({"world": i, "motion": j, **r.as_dict(), "Q": quality_score(r)})
    agg = {"rmm_proxy": rmm_proxy(rates), "minade": None}
    if scenario.future is not None:
        if scenario.future.shape[1] != rs.horizon or scenario.n_agents != rs.states.shape[1]:
            raise ValueError("ground-truth future and rollouts differ in shape")
        agg["minade"] = minade(rs.states[:, :, 1:], scenario.future)
    return {"per_rollout": per, "aggregate": agg}


def rollouts_to_dict(rs: RolloutSet) -> dict:
    A, Tp1 = rs.states.shape[1:3]
    return {
        "format": ROLLOUT_FORMAT, "version": ROLLOUT_VERSION, "n": rs.n, "m": rs.m,
        "dt": rs.dt, "n_agents": int(A), "horizon": int(Tp1 - 1),
        "rollouts": [{"world": i, "motion": j, "states": s.reshape(-1).tolist(),
                      "actions": a.reshape(-1).tolist()}
                     for (i, j), s, a in zip(rs.provenance, rs.states, rs.actions)],
        "metrics": rs.metrics,
    }


def rollouts_from_dict(d: dict) -> RolloutSet:
    if d.get("format") != ROLLOUT_FORMAT:
        raise ValueError(f"field 'format': expected {ROLLOUT_FORMAT!r}")
    if d.get("version") != ROLLOUT_VERSION:
        raise ValueError(f"field 'version': unsupported {d.get('version')!r}")
    try:
        A, T = int(d["n_agents"]), int(d["horizon"])
        states, actions, prov = [], [], []
        for r in d["rollouts"]:
            s = np.asarray(r["states"], dtype=float)
            a = np.asarray(r["actions"], dtype=float)
            if s.size != A * (T + 1) * 4 or a.size != A * T * 2:
                raise ValueError("field 'rollouts': state or action length mismatch")
            states.append(s.reshape(A, T + 1, 4))
            actions.append(a.reshape(A, T, 2))
            prov.append((r["world"], r["motion"]))
        return RolloutSet(np.stack(states), np.stack(actions), prov, int(d["n"]), int(d["m"]),
                          float(d["dt"]), d.get("metrics"))
    except KeyError as exc:
        raise ValueError(f"missing field {exc}") from None


def dumps_rollouts(rs: RolloutSet) -> str:
    return json.dumps(rollouts_to_dict(rs), sort_keys=True)


def loads_rollouts(text: str) -> RolloutSet:
    return rollouts_from_dict(json.loads(text))


# --------------------------------------------------------------------------
# synthetic two-region world


MIXED_GRID = GridConfig((1.0, 1.0, 1.0), (0.0, 0.0, 0.0, 16.0, 16.0, 4.0), (4, 4, 2))


def mixed_motion_batch(seed: int, lam: float, n_scenes: int = 6, t_draws: int = 4,
                       horizon: int = 4, history: int = 3, dynamic_fraction: float = 0.15,
                       grid: GridConfig = MIXED_GRID):
    """Flow training data where some latent cells blink and the rest stay put.

    Static blocks keep a random occupancy pattern.  Dynamic blocks share the
    same statistics in the history and then alternate between their pattern
    and its complement in the future, so every dynamic voxel changes each
    frame.  The ego is parked, so the weight maps come straight from the
    transition pipeline.

    Returns the batch and a ``(B, T, H, W)`` boolean mask of dynamic cells.
    """
    rng = np.random.default_rng(seed)
    H, W, _ = grid.latent_dims
    bx, by = grid.block
    pose = EgoPose2D()
    z0s, targets, ts, conds, weights, regions = [], [], [], [], [], []
    for _ in range(n_scenes):
        dyn = rng.uniform(size=(H, W)) < dynamic_fraction
        vox_dyn = np.repeat(np.repeat(dyn, bx, axis=0), by, axis=1)[..., None]
        base = (rng.uniform(size=grid.dims) < 0.4).astype(np.uint8)
        seq = []
        for f in range(history + horizon):
            flip = f >= history and (f - history) % 2 == 0
            frame = np.where(vox_dyn & flip, 1 - base, base)
            seq.append(OccupancyGrid(frame, grid))
        mask = voxelize(np.zeros((0, 3)), grid)[1]
        lat = [encode_latent(g, grid, f) for f, g in enumerate(seq)]
        wmaps = []
        for f in range(history, history + horizon):
            yw, mw = warp_occupancy(seq[f - 1], mask, pose, pose)
            wmaps.append(weight_map(transition_map(seq[f], mask, yw, mw), lam, grid).data)
        cond = WorldCondition(lat[:history], [pose] * history)
        target = np.stack([z.data for z in lat[history:]])
        for j in range(t_draws):
            ts.append((j + rng.uniform()) / t_draws)
            z0s.append(rng.standard_normal(target.shape))
            targets.append(target)
            conds.append(cond)
            weights.append(np.stack(wmaps))
            regions.append(np.broadcast_to(dyn, (horizon, H, W)))
    batch = FlowBatch(np.stack(z0s), np.stack(targets), np.array(ts), conds, np.stack(weights))
    return batch, np.stack(regions)
