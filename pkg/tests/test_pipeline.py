import logging

import numpy as np
import pytest

from cascadesim.diffusion import sample_motions_guided
from cascadesim.flow import FlowSamplerConfig, sample_flow_guided
from cascadesim.pipeline import (TrainConfig, UnicycleEmbedding, _conditions_for, _stage_seeds,
                                 cascaded_inference, closed_loop_simulate, dumps_rollouts,
                                 evaluate_rollouts, loads_rollouts, motion_weight_maps, observe,
                                 select_rollout, train_toy, world_condition)
from cascadesim.scenario import synth_scenario
from cascadesim.serialization import dumps_bundle
from cascadesim.traffic import actions_from_states, unicycle_rollout

from conftest import TINY_GRID


def test_cardinality_and_provenance(tiny_bundle, tiny_scenes):
    rs = cascaded_inference(tiny_scenes[0], tiny_bundle, n=3, m=4, seed=1)
    assert len(rs) == 12 and rs.states.shape == (12, 4, 21, 4)
    assert sorted(rs.provenance) == [(i, j) for i in range(3) for j in range(4)]


def test_single_rollout(tiny_bundle, tiny_scenes):
    rs = cascaded_inference(tiny_scenes[0], tiny_bundle, n=1, m=1, guidance_world=1.0,
                            guidance_motion=1.0, seed=3)
    assert len(rs) == 1 and np.all(np.isfinite(rs.states))


def test_inference_deterministic(tiny_bundle, tiny_scenes):
    a = cascaded_inference(tiny_scenes[1], tiny_bundle, 2, 3, 0.5, 0.5, seed=4)
    b = cascaded_inference(tiny_scenes[1], tiny_bundle, 2, 3, 0.5, 0.5, seed=4)
    np.testing.assert_array_equal(a.states, b.states)


def test_unguided_cascade_is_composition(tiny_bundle, tiny_scenes):
    sc, mb = tiny_scenes[2], tiny_bundle
    rs = cascaded_inference(sc, mb, 2, 3, 0.0, 0.0, seed=8)
    world_seed, motion_seeds = _stage_seeds(8, 2)
    frames = observe(sc.history, sc, mb.config.grid)
    cfg = FlowSamplerConfig(mb.config.flow_steps, world_seed, None, mb.horizon)
    worlds = sample_flow_guided(mb.velocity, world_condition(frames), 2, cfg)
    for i in range(2):
        cset = _conditions_for(worlds[i], sc, mb.pooler, mb.config.dim)
        tau = sample_motions_guided(mb.denoiser, cset, 3, mb.noise, seed=motion_seeds[i],
                                    shape=(sc.n_agents, mb.horizon, 2))
        np.testing.assert_array_equal(rs.actions[3 * i:3 * i + 3], tau)


def test_history_length_mismatch(tiny_bundle):
    sc = synth_scenario(0, 4, horizon=20, history_frames=5)
    with pytest.raises(ValueError, match="history"):
        cascaded_inference(sc, tiny_bundle)


def test_closed_loop_protocol(protocol_bundle):
    mb, scenes = protocol_bundle
    res = closed_loop_simulate(scenes[0], mb, 1, 10, 8.0, n=2, m=2, seed=0)
    assert res.committed.shape == (3, 80, 4)
    assert len(res.logs) == 8 and [l["step"] for l in res.logs] == list(range(0, 80, 10))
    again = unicycle_rollout(scenes[0].current, res.actions, scenes[0].dt)
    np.testing.assert_allclose(again, res.states, atol=1e-12)


def test_closed_loop_replan_every_step(tiny_bundle, tiny_scenes):
    res = closed_loop_simulate(tiny_scenes[0], tiny_bundle, 10, 10, 0.5, n=1, m=2, seed=0)
    assert res.committed.shape[1] == 5 and len(res.logs) == 5


def test_closed_loop_rejects_bad_rates(tiny_bundle, tiny_scenes):
    with pytest.raises(ValueError):
        closed_loop_simulate(tiny_scenes[0], tiny_bundle, 3, 10)


def test_best_q_prefers_clean_rollout():
    sc = synth_scenario(0, 3, horizon=20)
    clean = np.concatenate([sc.current[:, None], sc.future], axis=1)
    crash = clean.copy()
    crash[1] = crash[0]
    assert select_rollout(np.stack([crash, clean]), sc) == 1
    assert select_rollout(np.stack([crash, clean]), sc, "first") == 0
    with pytest.raises(ValueError):
        select_rollout(np.stack([clean]), sc, "random")


def test_training_idempotent(tiny_scenes):
    cfg = TrainConfig(grid=TINY_GRID, kf=5, flow_steps=3, t_draws=2, k_draws=3)
    assert dumps_bundle(train_toy(tiny_scenes, cfg)) == dumps_bundle(train_toy(tiny_scenes, cfg))


def test_static_world_uniform_weights(caplog):
    scenes = [synth_scenario(s, 3, horizon=10, stationary=True) for s in range(2)]
    frames = observe(np.concatenate([scenes[0].history, scenes[0].future], axis=1), scenes[0],
                     TINY_GRID)
    np.testing.assert_array_equal(motion_weight_maps(frames, 0.2, 1, TINY_GRID, 11), 1.0)
    base = dict(grid=TINY_GRID, kf=5, flow_steps=3, t_draws=2, k_draws=3)
    with caplog.at_level(logging.INFO, logger="cascadesim"):
        weighted = train_toy(scenes, TrainConfig(lam=0.2, **base))
    assert any("uniform" in r.message for r in caplog.records)
    plain = train_toy(scenes, TrainConfig(lam=0.0, **base))
    for k, v in plain.velocity.params.items():
        np.testing.assert_allclose(weighted.velocity.params[k], v, atol=1e-6)


def test_train_rejects_missing_future():
    sc = synth_scenario(0, 2, horizon=10)
    sc.future = None
    with pytest.raises(ValueError):
        train_toy([sc])


def test_rollout_json_round_trip(tiny_bundle, tiny_scenes):
    rs = cascaded_inference(tiny_scenes[0], tiny_bundle, 2, 2, seed=0)
    rs.metrics = evaluate_rollouts(rs, tiny_scenes[0])
    back = loads_rollouts(dumps_rollouts(rs))
    np.testing.assert_array_equal(back.states, rs.states)
    np.testing.assert_array_equal(back.actions, rs.actions)
    assert back.provenance == rs.provenance and back.metrics == rs.metrics


def test_minade_zero_when_truth_included(tiny_bundle, tiny_scenes):
    sc = tiny_scenes[0]
    rs = cascaded_inference(sc, tiny_bundle, 1, 2, seed=0)
    truth = np.concatenate([sc.current[:, None], sc.future], axis=1)
    rs.states[1] = truth
    rep = evaluate_rollouts(rs, sc)
    assert rep["aggregate"]["minade"] == pytest.approx(0.0, abs=1e-12)
    assert len(rep["per_rollout"]) == 2


def test_unicycle_embedding_vjp_matches_fd(rng):
    s0 = np.array([[0.0, 0.0, 5.0, 0.3], [3.0, 1.0, 2.0, -1.0]])
    emb = UnicycleEmbedding(s0, 0.1)
    tau = 0.5 * rng.standard_normal((3, 2, 4, 2))
    w = rng.standard_normal(emb(tau).shape)
    g = emb.vjp(tau, w)
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (1, 1, 2, 1), (2, 0, 3, 0)]:
        d = np.zeros_like(tau)
        d[idx] = eps
        fd = (np.sum(w * emb(tau + d)) - np.sum(w * emb(tau - d))) / (2 * eps)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_actions_round_trip_through_states(tiny_scenes):
    sc = tiny_scenes[0]
    full = np.concatenate([sc.current[:, None], sc.future], axis=1)
    np.testing.assert_allclose(unicycle_rollout(sc.current, actions_from_states(full, sc.dt), sc.dt),
                               full, atol=1e-9)
