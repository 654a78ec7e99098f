import numpy as np
import pytest

from cascadesim.dpp import GuidanceSchedule
from cascadesim.flow import (FlowBatch, FlowSamplerConfig, LinearVelocityField,
                             VelocityFieldSpec, WorldCondition, fit_linear_velocity,
                             gaussian_oracle_velocity, interpolate, motion_aware_rf_loss,
                             sample_flow_guided)
from cascadesim.occupancy import EgoPose2D, LatentGrid, LatentWeightMap
from cascadesim.pipeline import mixed_motion_batch
from cascadesim.flow import region_residual


def nn_dist(x):
    flat = x.reshape(len(x), -1)
    d = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1).mean()


def test_interpolate_endpoints_and_midpoint(rng):
    a, b = rng.standard_normal((2, 3, 4))
    np.testing.assert_array_equal(interpolate(a, b, 0.0), a)
    np.testing.assert_array_equal(interpolate(a, b, 1.0), b)
    np.testing.assert_allclose(interpolate(a, b, 0.5), (a + b) / 2)
    with pytest.raises(ValueError):
        interpolate(a, b, 1.5)


def test_interpolate_affine_in_t(rng):
    a, b = rng.standard_normal((2, 5))
    lhs = interpolate(a, b, 0.3 * 0.2 + 0.7 * 0.9)
    rhs = 0.3 * interpolate(a, b, 0.2) + 0.7 * interpolate(a, b, 0.9)
    np.testing.assert_allclose(lhs, rhs, atol=1e-15)


def test_oracle_velocity_examples(rng):
    z = rng.standard_normal(4)
    np.testing.assert_array_equal(gaussian_oracle_velocity(np.zeros(4), 1.0, z, 0.5), 0.0)
    np.testing.assert_allclose(gaussian_oracle_velocity(np.zeros(4), 1.0, z, 0.0), -z)
    np.testing.assert_allclose(gaussian_oracle_velocity(np.zeros(4), 1.0, z, 1.0), z)


def _cond(T=2, H=2, W=2, C=1, seed=0):
    r = np.random.default_rng(seed)
    return WorldCondition([LatentGrid(r.random((H, W, C))) for _ in range(3)], [EgoPose2D()] * 3)


def _batch(seed=0, B=6, T=2):
    r = np.random.default_rng(seed)
    conds = [_cond(seed=i) for i in range(B)]
    z0 = r.standard_normal((B, T, 2, 2, 1))
    zt = r.random((B, T, 2, 2, 1))
    return FlowBatch(z0, zt, r.uniform(0, 1, B), conds, np.ones((B, T, 2, 2)))


class ExactField:
    """Stand-in model that returns the true target velocity for a fixed batch."""

    def __init__(self, batch, bump=None):
        self.batch, self.bump = batch, bump

    def velocity(self, z, t, cond):
        i = int(np.flatnonzero(self.batch.t == t)[0])
        v = self.batch.z_target[i] - self.batch.z0[i]
        return v if self.bump is None else v + self.bump


def test_loss_zero_for_exact_model():
    b = _batch()
    assert motion_aware_rf_loss(ExactField(b), b) == 0.0


def test_loss_weight_doubling():
    b = _batch()
    bump = np.zeros((2, 2, 2, 1))
    bump[0, 1, 0, 0] = 0.5
    w = np.ones((2, 2))
    base = motion_aware_rf_loss(ExactField(b, bump), b, LatentWeightMap(w, 0.0))
    w2 = w.copy()
    w2[1, 0] = 2.0
    assert motion_aware_rf_loss(ExactField(b, bump), b, LatentWeightMap(w2, 0.0)) == 2 * base


def test_unit_weights_equal_unweighted_loss():
    b = _batch()
    m = fit_linear_velocity(b)
    unweighted = 0.0
    for i in range(len(b)):
        zt = interpolate(b.z0[i], b.z_target[i], b.t[i])
        unweighted += np.sum((m.velocity(zt, b.t[i], b.conds[i]) - (b.z_target[i] - b.z0[i])) ** 2)
    assert motion_aware_rf_loss(m, b) == pytest.approx(unweighted / len(b), rel=1e-12)


def test_linear_field_recovers_generator(rng):
    X = np.column_stack([rng.uniform(0, 0.99, 400), rng.standard_normal((400, 5))])
    est = LinearVelocityField(n_bins=4, ridge=0.0, time_basis=False)
    coef = rng.standard_normal((4, 5, 2))
    bins = np.minimum((X[:, 0] * 4).astype(int), 3)
    y = np.einsum("nf,nfc->nc", X[:, 1:], coef[bins])
    est.fit(X, y)
    np.testing.assert_allclose(est.coef_, coef, atol=1e-6)


def test_unit_weights_equal_ols(rng):
    X = np.column_stack([rng.uniform(0, 0.99, 200), rng.standard_normal((200, 3))])
    y = rng.standard_normal((200, 1))
    a = LinearVelocityField(n_bins=2).fit(X, y, sample_weight=np.ones(200))
    b = LinearVelocityField(n_bins=2).fit(X, y)
    np.testing.assert_allclose(a.coef_, b.coef_)


def test_empty_bin_zero_map(rng):
    X = np.column_stack([rng.uniform(0, 0.4, 50), rng.standard_normal((50, 2))])
    est = LinearVelocityField(n_bins=4).fit(X, rng.standard_normal((50, 1)))
    assert not est.coef_[3].any()
    assert est.get_params() == {"n_bins": 4, "ridge": 1e-6, "time_basis": True}


def test_fit_beats_zero_model():
    b = _batch()
    m = fit_linear_velocity(b)
    zero = VelocityFieldSpec("linear_per_bin", {**m.params, "coef": np.zeros_like(m.params["coef"])})
    assert motion_aware_rf_loss(m, b) <= motion_aware_rf_loss(zero, b)


def test_loss_nonincreasing_as_ridge_shrinks():
    b = _batch()
    losses = [motion_aware_rf_loss(fit_linear_velocity(b, ridge=r), b) for r in (1.0, 1e-2, 1e-4)]
    assert losses[0] >= losses[1] >= losses[2]


def test_two_region_weighting_helps_dynamic_cells():
    b0, region = mixed_motion_batch(0, 0.0)
    b2, _ = mixed_motion_batch(0, 0.2)
    r0 = region_residual(fit_linear_velocity(b0), b0, region)
    r2 = region_residual(fit_linear_velocity(b2), b0, region)
    assert r2 < r0


def test_oracle_transport_moments():
    mean = np.array([0.5, -1.0, 2.0])
    model = VelocityFieldSpec("gaussian_oracle", {"mean": mean, "var": 2.0})
    z = sample_flow_guided(model, None, 2000, FlowSamplerConfig(100, seed=11))
    assert np.all(np.abs(z.mean(0) - mean) <= 4 * np.sqrt(2.0 / 2000))
    assert np.all(np.abs(z.var(0) / 2.0 - 1) <= 0.1)


def test_zero_guidance_bit_exact_and_order_commutes():
    model = VelocityFieldSpec("gaussian_oracle", {"mean": np.ones(3), "var": 0.5})
    cfg0 = FlowSamplerConfig(10, seed=4)
    cfgg = FlowSamplerConfig(10, seed=4, guidance=GuidanceSchedule(0.0, "linear"))
    a = sample_flow_guided(model, None, 5, cfg0)
    np.testing.assert_array_equal(a, sample_flow_guided(model, None, 5, cfgg))
    seeds = [11, 22, 33]
    fwd = sample_flow_guided(model, None, 3, cfg0, seeds=seeds)
    rev = sample_flow_guided(model, None, 3, cfg0, seeds=seeds[::-1])
    np.testing.assert_array_equal(fwd[::-1], rev)


def test_single_candidate_unaffected_by_guidance():
    model = VelocityFieldSpec("gaussian_oracle", {"mean": np.ones(3), "var": 0.5})
    a = sample_flow_guided(model, None, 1, FlowSamplerConfig(10, seed=4))
    b = sample_flow_guided(model, None, 1, FlowSamplerConfig(10, seed=4, guidance=GuidanceSchedule(1.0)))
    np.testing.assert_array_equal(a, b)


def test_guidance_spreads_candidates():
    model = VelocityFieldSpec("gaussian_oracle", {"mean": np.full(4, 1.0), "var": 0.3})
    wins = 0
    for s in range(10):
        a = sample_flow_guided(model, None, 8, FlowSamplerConfig(20, seed=s))
        b = sample_flow_guided(model, None, 8, FlowSamplerConfig(20, seed=s, guidance=GuidanceSchedule(0.3)))
        wins += nn_dist(b) > nn_dist(a)
    assert wins == 10


def test_zero_candidates_rejected():
    model = VelocityFieldSpec("gaussian_oracle", {"mean": np.ones(2), "var": 1.0})
    with pytest.raises(ValueError):
        sample_flow_guided(model, None, 0, FlowSamplerConfig())


def test_linear_field_needs_condition():
    b = _batch()
    m = fit_linear_velocity(b)
    with pytest.raises(ValueError):
        m.velocity(np.zeros(m.event_shape), 0.5, None)
