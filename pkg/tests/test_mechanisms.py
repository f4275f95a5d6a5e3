"""Unit and property tests for the primitive private operations."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dplac import mechanisms

finite_vectors = hnp.arrays(
    dtype=np.float64,
    shape=st.integers(1, 24),
    elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False),
)


class TestClip:
    def test_large_vector_scaled_to_threshold(self):
        v = np.array([3.0, 4.0])  # norm 5
        out = mechanisms.clip(v, 1.0)
        assert np.linalg.norm(out) == pytest.approx(1.0, rel=1e-12)
        assert out == pytest.approx(v / 5.0, rel=1e-12)

    def test_small_vector_unchanged_bitwise(self):
        v = np.array([0.3, -0.4])
        out = mechanisms.clip(v, 1.0)
        assert out is v

    def test_zero_vector_unchanged(self):
        v = np.zeros(5)
        assert mechanisms.clip(v, 2.0) is v

    def test_rejects_nonpositive_threshold(self):
        with pytest.raises(ValueError):
            mechanisms.clip(np.ones(3), 0.0)
        with pytest.raises(ValueError):
            mechanisms.clip(np.ones(3), -1.0)

    @settings(max_examples=100, deadline=None)
    @given(v=finite_vectors, threshold=st.floats(1e-6, 1e6))
    def test_norm_never_exceeds_threshold(self, v, threshold):
        out = mechanisms.clip(v, threshold)
        assert np.linalg.norm(out) <= threshold * (1 + 1e-12)

    @settings(max_examples=100, deadline=None)
    @given(v=finite_vectors, threshold=st.floats(1e-6, 1e6))
    def test_idempotent(self, v, threshold):
        once = mechanisms.clip(v, threshold)
        twice = mechanisms.clip(once, threshold)
        np.testing.assert_allclose(twice, once, rtol=1e-12, atol=0)

    @settings(max_examples=100, deadline=None)
    @given(
        v=finite_vectors,
        threshold=st.floats(1e-3, 1e3),
        scale=st.floats(1e-3, 1e3),
    )
    def test_positively_homogeneous(self, v, threshold, scale):
        lhs = mechanisms.clip(scale * v, scale * threshold)
        rhs = scale * mechanisms.clip(v, threshold)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)


class TestGaussianPerturb:
    def test_zero_sigma_returns_input_without_consuming_stream(self):
        rng = np.random.default_rng(0)
        v = np.array([1.0, -2.0])
        out = mechanisms.gaussian_perturb(v, 0.0, rng)
        assert out is v
        # The stream must be untouched: next draw equals a fresh stream's first.
        assert rng.normal() == np.random.default_rng(0).normal()

    def test_reproducible_under_seed(self):
        v = np.zeros(8)
        a = mechanisms.gaussian_perturb(v, 2.0, np.random.default_rng(7))
        b = mechanisms.gaussian_perturb(v, 2.0, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_sample_moments(self):
        out = mechanisms.gaussian_perturb(
            np.zeros(10_000), 3.0, np.random.default_rng(123)
        )
        assert abs(out.mean()) < 0.1
        assert out.std() == pytest.approx(3.0, rel=0.03)

    def test_rejects_negative_sigma(self):
        with pytest.raises(ValueError):
            mechanisms.gaussian_perturb(np.zeros(2), -0.5, np.random.default_rng(0))


class TestVotes:
    def test_one_hot_shape_and_position(self):
        u = mechanisms.one_hot_vote(3, 5)
        assert u.tolist() == [0, 0, 0, 1, 0]

    def test_one_hot_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            mechanisms.one_hot_vote(5, 5)
        with pytest.raises(ValueError):
            mechanisms.one_hot_vote(-1, 5)

    def test_aggregate_noiseless_is_exact_mean(self):
        votes = [mechanisms.one_hot_vote(i, 4) for i in (0, 0, 1, 3)]
        hist = mechanisms.aggregate_votes(votes, 0.0, np.random.default_rng(0))
        np.testing.assert_allclose(hist, [0.5, 0.25, 0.0, 0.25])

    def test_aggregate_noise_added_to_sum_then_divided(self):
        votes = [mechanisms.one_hot_vote(0, 3) for _ in range(4)]
        z = 1.5
        hist = mechanisms.aggregate_votes(votes, z, np.random.default_rng(11))
        noise = np.random.default_rng(11).normal(0.0, z, size=3)
        np.testing.assert_allclose(hist, (np.array([4.0, 0, 0]) + noise) / 4)

    def test_aggregate_rejects_bad_votes(self):
        with pytest.raises(ValueError):
            mechanisms.aggregate_votes([], 0.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            mechanisms.aggregate_votes(
                [np.array([1.0, 1.0])], 0.0, np.random.default_rng(0)
            )
        with pytest.raises(ValueError):
            mechanisms.aggregate_votes(
                [np.array([0.5, 0.5])], 0.0, np.random.default_rng(0)
            )
        with pytest.raises(ValueError):
            mechanisms.aggregate_votes(
                [mechanisms.one_hot_vote(0, 2), mechanisms.one_hot_vote(0, 3)],
                0.0,
                np.random.default_rng(0),
            )

    def test_select_mode_breaks_ties_toward_smaller_index(self):
        grid = np.array([1.0, 2.0, 4.0])
        assert mechanisms.select_mode(np.array([0.5, 0.5, 0.1]), grid) == 1.0
        assert mechanisms.select_mode(np.array([0.1, 0.5, 0.5]), grid) == 2.0

    def test_select_mode_shift_invariant(self):
        grid = np.array([1.0, 2.0, 4.0])
        counts = np.array([0.2, 0.9, 0.4])
        assert mechanisms.select_mode(counts, grid) == mechanisms.select_mode(
            counts + 17.0, grid
        )

    def test_select_mode_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            mechanisms.select_mode(np.ones(3), np.ones(4))


class TestNearestBucket:
    def test_exact_and_between(self):
        grid = np.array([1.0, 2.0, 4.0])
        assert mechanisms.nearest_bucket(2.0, grid) == 1
        assert mechanisms.nearest_bucket(2.9, grid) == 1
        assert mechanisms.nearest_bucket(3.1, grid) == 2
        assert mechanisms.nearest_bucket(100.0, grid) == 2
        assert mechanisms.nearest_bucket(0.01, grid) == 0

    def test_midpoint_tie_goes_to_smaller_index(self):
        assert mechanisms.nearest_bucket(3.0, np.array([2.0, 4.0])) == 0

    def test_rejects_nonpositive_value(self):
        with pytest.raises(ValueError):
            mechanisms.nearest_bucket(0.0, np.array([1.0]))


class TestPrivateScalarMean:
    def test_noiseless_is_exact_clipped_mean(self):
        rng = np.random.default_rng(0)
        assert mechanisms.private_scalar_mean([0.5, 3.0], 1.0, 0.0, rng) == 0.75
        assert mechanisms.private_scalar_mean([0.5, 3.0], 10.0, 0.0, rng) == 1.75

    def test_negative_values_clamp_to_zero(self):
        rng = np.random.default_rng(0)
        assert mechanisms.private_scalar_mean([-5.0, 1.0], 2.0, 0.0, rng) == 0.5

    def test_noise_scale_is_z_times_clip(self):
        z, clip_at = 2.0, 3.0
        got = mechanisms.private_scalar_mean(
            [1.0, 1.0], clip_at, z, np.random.default_rng(5)
        )
        noise = np.random.default_rng(5).normal(0.0, z * clip_at)
        assert got == pytest.approx((2.0 + noise) / 2, rel=1e-15)

    def test_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            mechanisms.private_scalar_mean([], 1.0, 0.0, rng)
        with pytest.raises(ValueError):
            mechanisms.private_scalar_mean([1.0], 0.0, 0.0, rng)


class TestGridValidation:
    def test_threshold_grid_accepts_default_shape(self):
        grid = mechanisms.validate_threshold_grid((0.1, 1.0, 10.0))
        assert grid.tolist() == [0.1, 1.0, 10.0]

    def test_threshold_grid_rejections(self):
        for bad in [(), (0.0, 1.0), (2.0, 1.0), (1.0, 1.0)]:
            with pytest.raises(ValueError):
                mechanisms.validate_threshold_grid(bad)

    def test_multiplier_grid_accepts_unit_terminated(self):
        m = mechanisms.validate_multiplier_grid((0.1, 0.5, 1.0))
        assert m.tolist() == [0.1, 0.5, 1.0]

    def test_multiplier_grid_rejections(self):
        for bad in [(), (0.0, 1.0), (0.5, 0.9), (1.0, 0.5), (0.5, 1.5)]:
            with pytest.raises(ValueError):
                mechanisms.validate_multiplier_grid(bad)
