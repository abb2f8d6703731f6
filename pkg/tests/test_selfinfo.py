import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from csimask import selfinfo as si
from csimask.errors import ConfigError

small = arrays(np.float64, (2, 6, 5), elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=25, deadline=None)
@given(small, st.sampled_from(["exclude", "zero"]), st.booleans())
def test_analytic_matches_loop_oracle_at_radius_one(h, border, center):
    cfg = si.SelfInfoConfig(radius_r=1, border=border, include_center=center)
    a = si.self_information_analytic(h, cfg)
    b = si.brute_force_kde_oracle(h, cfg)
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-9)
    np.testing.assert_array_equal(a.mask, b.mask)


@settings(max_examples=25, deadline=None)
@given(small, st.floats(-50, 50), st.integers(1, 3))
def test_shift_invariance_with_excluded_border(h, c, r):
    cfg = si.SelfInfoConfig(radius_r=r)
    a = si.self_information_analytic(h, cfg).values
    b = si.self_information_analytic(h + c, cfg).values
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_zero_border_is_not_shift_invariant():
    h = np.random.default_rng(0).standard_normal((1, 5, 5))
    cfg = si.SelfInfoConfig(radius_r=1, border="zero")
    a = si.self_information_analytic(h, cfg).values
    b = si.self_information_analytic(h + 3.0, cfg).values
    assert np.abs(a - b).max() > 1e-3


def test_constant_tensor_has_flat_self_information():
    cfg = si.SelfInfoConfig(radius_r=2, bandwidth_h=0.5)
    v = si.self_information_analytic(np.full((2, 7, 7), 1.7), cfg).values
    np.testing.assert_allclose(v, -np.log2(1 / (np.sqrt(2 * np.pi) * 0.5)), atol=1e-12)


def test_outlier_gets_highest_self_information():
    h = np.zeros((1, 9, 9))
    h[0, 4, 4] = 5.0
    sm = si.self_information_analytic(h, si.SelfInfoConfig(radius_r=1, quantile=0.95))
    assert np.unravel_index(np.argmax(sm.values[0]), (9, 9)) == (4, 4)
    assert sm.mask[0, 4, 4] == 1


@given(st.integers(2, 40), st.floats(0.05, 0.95))
def test_quantile_mask_keeps_exact_count_with_low_index_ties(n, rho):
    cfg = si.SelfInfoConfig(quantile=rho)
    vals = np.zeros((1, n))  # all tied
    mask = si.threshold_mask(vals, cfg)
    keep = n - int(round(rho * n))
    assert mask.sum() == keep
    assert mask[0, :keep].all()


def test_absolute_threshold():
    cfg = si.SelfInfoConfig(threshold_mode="absolute", threshold=1.0)
    mask = si.threshold_mask(np.array([[0.5, 1.0], [2.0, -1.0]]), cfg)
    np.testing.assert_array_equal(mask, [[0, 1], [1, 0]])


def test_config_and_kernel_errors():
    for bad in (dict(radius_r=0), dict(bandwidth_h=0.0), dict(quantile=1.0), dict(epsilon=0.0),
                dict(threshold_mode="x"), dict(border="wrap")):
        with pytest.raises(ConfigError):
            si.SelfInfoConfig(**bad).validate()
    with pytest.raises(ConfigError):
        si.gaussian_kernel(0.0, 1.0, -1.0)


def test_sample_neighbors_reads_the_subgrid():
    plane = np.arange(25.0).reshape(5, 5)
    got = si.sample_neighbors(si.pad(plane, 2), (2, 2), 2)
    np.testing.assert_array_equal(got, [0, 2, 4, 10, 12, 14, 20, 22, 24])
    assert len(si.window_offsets(2)) == 25 and len(si.subgrid_offsets(2, False)) == 8


def test_frozen_aggregator():
    agg = si.FrozenAggregator(seed=3)
    assert agg.weights.shape == (64, 9, 1, 1)
    with pytest.raises(ValueError):
        agg.weights[0, 0, 0, 0] = 1.0
    w = agg.weights[:, :, 0, 0]
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    np.testing.assert_array_equal(w, si.FrozenAggregator(seed=3).weights[:, :, 0, 0])
    g = si.FrozenAggregator(init="gaussian").weights[:, :, 0, 0]
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0)
    with pytest.raises(ConfigError):
        si.FrozenAggregator(init="nope")


def test_uniform_aggregator_reproduces_analytic_map():
    h = np.random.default_rng(1).standard_normal((2, 8, 8))
    cfg = si.SelfInfoConfig(radius_r=2)
    maps, mask = si.sicnet_forward(si.sicnet_kernel_maps(h, cfg), si.FrozenAggregator(init="uniform"), cfg)
    ref = si.self_information_analytic(h, cfg)
    for c in range(64):
        np.testing.assert_allclose(maps[:, c], ref.values, atol=1e-12)
    np.testing.assert_array_equal(mask[:, 0], ref.mask)


def test_encoder_mask_shape_and_density():
    h = np.random.default_rng(2).standard_normal((3, 2, 8, 8))
    cfg = si.SelfInfoConfig(radius_r=1)
    mask = si.encoder_mask(h, si.FrozenAggregator(), cfg)
    assert mask.shape == (3, 64, 8, 8)
    np.testing.assert_array_equal(mask.reshape(3, 64, -1).sum(-1), 32)
