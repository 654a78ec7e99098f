import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascadesim.traffic import (AgentState, KinematicLimits, LaneMap, ViolationRates,
                                actions_from_states, boxes_overlap, box_corners, minade,
                                quality_score, rmm_aggregate, rmm_proxy, unicycle_rollout,
                                unicycle_vjp, violation_rates, wrap_angle)

STRAIGHT = LaneMap([np.array([[-100.0, 0.0], [100.0, 0.0]])], [2.0])


def test_straight_cruise_exact():
    out = unicycle_rollout(AgentState(0, 0, 10, 0), np.zeros((10, 2)), 0.1)
    assert out.shape == (11, 4)
    assert out[-1, 0] == pytest.approx(10.0, abs=1e-12)


def test_constant_acceleration_exact():
    out = unicycle_rollout(AgentState(0, 0, 0, 0), np.tile([2.0, 0.0], (10, 1)), 0.1)
    assert abs(out[-1, 2] - 2.0) <= 1e-12
    assert abs(out[-1, 0] - 1.0) <= 1e-12


def test_circle_returns_to_start():
    steps = int(round(4 * np.pi / 0.01))
    out = unicycle_rollout(AgentState(0, 0, 5, 0), np.tile([0.0, 0.5], (steps, 1)), 0.01)
    assert np.hypot(*out[-1, :2]) <= 0.05


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-1, 1)), min_size=1, max_size=30))
def test_speed_update_exact(acts):
    acts = np.array(acts)
    out = unicycle_rollout([1.0, 2.0, 3.0, 0.4], acts, 0.1)
    assert len(out) == len(acts) + 1
    assert abs(out[-1, 2] - (3.0 + acts[:, 0].sum() * 0.1)) <= 1e-12


def test_actions_from_states_inverts_rollout(rng):
    acts = rng.uniform(-1, 1, (20, 2))
    out = unicycle_rollout([0, 0, 5, 0.2], acts, 0.1)
    np.testing.assert_allclose(actions_from_states(out, 0.1), acts, atol=1e-12)


def test_vjp_matches_finite_differences(rng):
    acts = rng.uniform(-1, 1, (2, 6, 2))
    s0 = np.array([[0, 0, 5, 0.1], [3, 1, 2, -0.4]])
    w = rng.standard_normal((2, 7, 4))

    def f(a):
        return float(np.sum(w * unicycle_rollout(s0, a, 0.1)))

    g = unicycle_vjp(unicycle_rollout(s0, acts, 0.1), acts, w, 0.1)
    fd = np.zeros_like(acts)
    for idx in np.ndindex(acts.shape):
        p, m = acts.copy(), acts.copy()
        p[idx] += 1e-6
        m[idx] -= 1e-6
        fd[idx] = (f(p) - f(m)) / 2e-6
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_wrap_angle_range():
    a = wrap_angle(np.array([np.pi, -np.pi, 3 * np.pi, 0.1]))
    np.testing.assert_allclose(a, [np.pi, np.pi, np.pi, 0.1])


def test_clean_agent_no_violations():
    states = unicycle_rollout([0, 0, 5, 0], np.zeros((20, 2)), 0.1)[None]
    r = violation_rates(states, lane_map=STRAIGHT)
    assert r == ViolationRates(0, 0, 0, 0)


def test_shared_pose_collides():
    s = np.zeros((2, 3, 4))
    s[1, :, 0] = [30, 0, 0]
    r = violation_rates(s, lane_map=STRAIGHT)
    assert r.col == 1.0


def test_touching_boxes_do_not_collide():
    s = np.array([[0, 0, 0, 0], [4.6, 0, 0, 0]], dtype=float)
    c = box_corners(s, np.tile([4.6, 2.0], (2, 1)))
    assert not boxes_overlap(c[0], c[1])


def test_excess_acceleration_flags_kinematics():
    acts = np.zeros((5, 2))
    acts[2, 0] = 2 * KinematicLimits().a_max
    states = unicycle_rollout([0, 0, 5, 0], acts, 0.1)[None]
    assert violation_rates(states, lane_map=STRAIGHT).kin == 1.0


def test_offroad_and_wrong_way():
    s = np.zeros((2, 2, 4))
    s[0, :, 1] = 5.0            # outside the corridor
    s[1, :, 0] = [20, 19]
    s[1, :, 3] = np.pi          # against lane direction
    r = violation_rates(s, lane_map=STRAIGHT, limits=KinematicLimits(1e3, 1e3, 1e3))
    assert (r.off, r.wro) == (0.5, 0.5)


def test_empty_map_sets_flag():
    r = violation_rates(np.zeros((1, 2, 4)), lane_map=LaneMap([], []))
    assert r.empty_map and r.off == 0 and r.wro == 0


def test_adding_violation_never_lowers_rates():
    s = unicycle_rollout([0, 0, 5, 0], np.zeros((10, 2)), 0.1)[None]
    base = violation_rates(s, lane_map=STRAIGHT, per_timestep=True)
    s2 = s.copy()
    s2[0, 5, 1] = 9.0
    worse = violation_rates(s2, lane_map=STRAIGHT, per_timestep=True)
    for k in ("kin", "col", "off", "wro"):
        assert getattr(worse, k) >= getattr(base, k)


def test_quality_score_anchors():
    assert quality_score(ViolationRates(0, 0, 0, 0)) == 1.0
    assert quality_score(ViolationRates(0, 1, 0, 0)) == 0.55
    assert quality_score(ViolationRates(1, 1, 1, 1)) == pytest.approx(0.0, abs=1e-15)
    assert quality_score(ViolationRates(1, 1, 1, 1), floor=1e-6) == 1e-6


def test_rmm_aggregate_anchors():
    assert rmm_aggregate(1, 1, 1) == pytest.approx(1.0, abs=1e-15)
    assert rmm_aggregate(0, 1, 0) == 0.45
    assert abs(rmm_aggregate(0.4931, 0.8143, 0.9185) - 0.7865) <= 5e-4


def test_rmm_proxy_clean_is_one():
    assert rmm_proxy([ViolationRates(0, 0, 0, 0)] * 3) == pytest.approx(1.0)


def test_minade_examples(rng):
    gt = rng.standard_normal((3, 10, 4))
    assert minade(np.stack([gt + 1, gt]), gt) == 0.0
    off = gt.copy()
    off[..., 0] += 3
    off[..., 1] += 4
    assert minade(off[None], gt) == pytest.approx(5.0)
    r = rng.standard_normal((2, 3, 10, 4))
    assert minade(np.concatenate([r, rng.standard_normal((1, 3, 10, 4))]), gt) <= minade(r, gt)
    with pytest.raises(ValueError):
        minade(np.zeros((0, 3, 10, 4)), gt)
