import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cascadesim.dpp import (LOG_PROB_FLOOR, GuidanceSchedule, build_kernel, dpp_log_prob,
                            dpp_log_prob_grad, dpp_prob, guidance_term, jittered_log_prob)


def fd_grad(x, q=None, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (jittered_log_prob(xp, q) - jittered_log_prob(xm, q)) / (2 * h)
    return g


def test_kernel_unit_quality_is_plain_kernel(rng):
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(build_kernel(x, np.ones(4)), build_kernel(x))


def test_kernel_orthogonal_pair():
    x = np.eye(2)
    np.testing.assert_array_equal(build_kernel(x), np.eye(2))
    np.testing.assert_allclose(build_kernel(x, [0.5, 0.5]), 0.25 * np.eye(2), atol=0)


def test_single_unit_sample_half():
    lam = build_kernel(np.array([[1.0, 0.0, 0.0]]))
    assert dpp_prob(lam) == 0.5
    assert dpp_log_prob(lam) == pytest.approx(-np.log(2), abs=1e-15)


def test_duplicate_candidates_clamped():
    x = np.array([[1.0, 2.0], [1.0, 2.0]])
    assert dpp_log_prob(build_kernel(x)) == LOG_PROB_FLOOR
    assert dpp_prob(build_kernel(x)) <= 1e-12


def test_orthogonal_pair_probability():
    assert dpp_prob(build_kernel(np.eye(2), [0.5, 0.5])) == pytest.approx(0.04, abs=1e-15)


def test_nonsymmetric_kernel_rejected():
    with pytest.raises(ValueError):
        dpp_log_prob(np.array([[1.0, 0.2], [0.1, 1.0]]))


def test_single_candidate_gradient_zero():
    np.testing.assert_array_equal(dpp_log_prob_grad(np.array([[0.3, -2.0]])), 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    d = int(r.integers(2, 9))
    k = int(r.integers(2, min(6, d) + 1))
    x = r.standard_normal((k, d))
    q = r.uniform(0.3, 1.0, k) if seed % 2 else None
    g, f = dpp_log_prob_grad(x, q), fd_grad(x, q)
    assert np.linalg.norm(g - f) <= 1e-4 * max(np.linalg.norm(f), 1e-12)


def test_near_duplicates_repel():
    x = np.array([[1.0, 0.0], [1.0, 0.05]])
    g = dpp_log_prob_grad(x)
    diff = x[1] - x[0]
    # ascent moves the pair apart along their difference
    assert g[1] @ diff > 0 and g[0] @ diff < 0
    np.testing.assert_allclose(np.sign(g), np.sign(fd_grad(x)))


def test_gradient_permutation_equivariant(rng):
    x = rng.standard_normal((4, 5))
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(dpp_log_prob_grad(x[perm]), dpp_log_prob_grad(x)[perm], atol=1e-10)


def test_log_prob_rotation_invariant(rng):
    x = rng.standard_normal((3, 4))
    rot, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert dpp_log_prob(build_kernel(x @ rot.T)) == pytest.approx(dpp_log_prob(build_kernel(x)), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(arrays(float, (3, 4), elements=st.floats(-5, 5)).filter(lambda a: np.linalg.matrix_rank(a) == 3),
       st.floats(0.05, 0.95))
def test_probability_range_and_quality_monotone(x, c):
    q = np.full(3, 0.9)
    p_full = dpp_prob(build_kernel(x, q))
    p_scaled = dpp_prob(build_kernel(x, c * q))
    assert 0.0 <= p_full < 1.0
    assert p_scaled <= p_full


def test_guidance_zero_strength_exact_zero(rng):
    g = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(guidance_term(g, GuidanceSchedule(0.0), 0, 10), 0.0)


def test_guidance_zero_gradient_no_blowup():
    out = guidance_term(np.zeros((2, 3)), GuidanceSchedule(1.0), 0, 5)
    assert np.all(np.isfinite(out)) and np.all(out == 0)


def test_guidance_linear_in_strength(rng):
    g = rng.standard_normal((3, 4))
    a = guidance_term(g, GuidanceSchedule(0.3), 2, 10)
    b = guidance_term(g, GuidanceSchedule(0.6), 2, 10)
    np.testing.assert_allclose(b, 2 * a, rtol=1e-15)


def test_guidance_joint_normalisation(rng):
    g = rng.standard_normal((3, 4))
    out = guidance_term(g, GuidanceSchedule(0.7), 0, 4)
    assert np.linalg.norm(out) == pytest.approx(0.7)
    np.testing.assert_allclose(out, -0.7 * g / np.linalg.norm(g))


def test_schedule_profiles():
    lin = GuidanceSchedule(1.0, "linear")
    assert lin.multiplier(0, 4) == 1.0 and lin.multiplier(3, 4) == 0.25
    seq = GuidanceSchedule(1.0, [0.5, 0.0])
    assert seq.multiplier(1) == 0.0
    assert GuidanceSchedule.from_dict(seq.to_dict()) == seq
    with pytest.raises(ValueError):
        GuidanceSchedule(-1.0)
    with pytest.raises(ValueError):
        GuidanceSchedule(1.0, "cubic")
