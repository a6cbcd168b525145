"""Feature assembly layout and scaler behaviour."""

import numpy as np
import pytest

from fedvec.features import (
    STD_FLOOR,
    ScalerParams,
    assemble_features,
    feature_dim,
    fit_scaler,
    inverse_transform,
    transform,
)
from fedvec.store import ShardStats, shard_stats


class TestAssembleFeatures:
    def test_layout_worked_example(self):
        """d=2: [query | centroid | dist | count | density], length 7."""
        stats = ShardStats(centroid=np.array([3.0, 4.0]), count=2, density=0.2)
        row = assemble_features(np.array([0.0, 0.0]), stats)
        np.testing.assert_array_equal(row, [0.0, 0.0, 3.0, 4.0, 25.0, 2.0, 0.2])
        assert row.shape == (feature_dim(2),)

    def test_random_dim32_slots(self):
        """Each slot recomputed independently of assemble_features."""
        rng = np.random.default_rng(42)
        members = rng.standard_normal((40, 32))
        stats = shard_stats(members)
        query = rng.standard_normal(32)
        row = assemble_features(query, stats)

        assert row.shape == (67,)
        np.testing.assert_array_equal(row[:32], query)
        np.testing.assert_array_equal(row[32:64], stats.centroid)
        diff = query - stats.centroid
        assert row[64] == pytest.approx(float(diff @ diff), rel=1e-15)
        assert row[65] == 40.0
        assert row[66] == stats.density

    def test_euclidean_mode(self):
        stats = ShardStats(centroid=np.array([3.0, 4.0]), count=1, density=1.0)
        row = assemble_features(np.zeros(2), stats, distance="euclidean")
        assert row[2 * 2] == pytest.approx(5.0)

    def test_bad_distance_mode(self):
        stats = ShardStats(centroid=np.zeros(2), count=1, density=1.0)
        with pytest.raises(ValueError):
            assemble_features(np.zeros(2), stats, distance="taxicab")

    def test_rejects_matrix_query(self):
        stats = ShardStats(centroid=np.zeros(2), count=1, density=1.0)
        with pytest.raises(ValueError):
            assemble_features(np.zeros((2, 2)), stats)


class TestScaler:
    def test_two_row_example(self):
        """Rows [0],[2]: mean 1, population std 1 (not the sample 1.414)."""
        params = fit_scaler(np.array([[0.0], [2.0]]))
        assert params.mean[0] == 1.0
        assert params.std[0] == 1.0

    def test_constant_column_floored(self):
        rows = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
        params = fit_scaler(rows)
        assert params.std[0] == STD_FLOOR
        out = transform(params, rows)
        np.testing.assert_array_equal(out[:, 0], np.zeros(5))

    def test_standardized_moments(self):
        rng = np.random.default_rng(42)
        rows = rng.normal(5.0, 3.0, size=(400, 7))
        out = transform(fit_scaler(rows), rows)
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-12)

    def test_inverse_recovers_rows(self):
        rng = np.random.default_rng(7)
        rows = rng.normal(-2.0, 10.0, size=(50, 5))
        params = fit_scaler(rows)
        back = inverse_transform(params, transform(params, rows))
        np.testing.assert_allclose(back, rows, atol=1e-9)

    def test_single_row_transform_shape(self):
        rows = np.random.default_rng(1).standard_normal((10, 4))
        params = fit_scaler(rows)
        assert transform(params, rows[0]).shape == (4,)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            fit_scaler(np.ones((1, 3)))

    def test_width_mismatch(self):
        params = ScalerParams(mean=np.zeros(3), std=np.ones(3))
        with pytest.raises(ValueError):
            transform(params, np.zeros(4))
        with pytest.raises(ValueError):
            inverse_transform(params, np.zeros(4))
