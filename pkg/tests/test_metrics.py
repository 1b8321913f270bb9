import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from adapfl import metrics
from adapfl.grid import VilField, ZoneId
from adapfl.nn import ModelWeights, init_model

from conftest import random_weights


def scalar_model(x):
    return ModelWeights.from_arrays([np.zeros((1, 1, 3, 3)), np.array([float(x)])])


class TestImageErrors:
    def test_perfect(self):
        mse, mae = metrics.image_errors([np.ones((3, 3))], [np.ones((3, 3))])
        assert mse[0] == 0 and mae[0] == 0

    def test_hand_values(self):
        mse, mae = metrics.image_errors([np.ones((2, 2))], [np.zeros((2, 2))])
        assert (mse[0], mae[0]) == (1, 1)
        mse, mae = metrics.image_errors([np.array([[0.0, 2.0]])], [np.zeros((1, 2))])
        assert (mse[0], mae[0]) == (2, 1)

    def test_accepts_fields(self):
        mse, _ = metrics.image_errors([VilField(np.ones((2, 2)))], [VilField(np.zeros((2, 2)))])
        assert mse[0] == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.image_errors([np.zeros((2, 2))], [np.zeros((2, 3))])


class TestAggregates:
    def test_mean_of_images(self):
        assert metrics.aggregate_errors([1, 3]) == 2
        assert metrics.aggregate_errors([0.7]) == 0.7

    def test_empty_is_error(self):
        with pytest.raises(ValueError):
            metrics.aggregate_errors([])

    def test_rmse_paper_values(self):
        assert metrics.rmse(0.1352) == pytest.approx(0.3677, abs=5e-4)
        assert metrics.rmse(0.0815) == pytest.approx(0.2855, abs=5e-4)
        assert metrics.rmse(0) == 0

    def test_skill_score(self):
        assert metrics.skill_score(0.1082, 0.2235) == pytest.approx(0.5159, abs=5e-4)
        assert metrics.skill_score(0.3, 0.3) == 0
        assert metrics.skill_score(0, 0.3) == 1
        with pytest.raises(ValueError):
            metrics.skill_score(0.1, 0)


class TestNorms:
    def test_zero_weights(self):
        assert metrics.nested_weight_norm(init_model(0, (3, 4, 1)).map(np.zeros_like)) == 0

    @given(st.integers(0, 2**32 - 1))
    def test_matches_flat_norm(self, seed):
        w = random_weights(np.random.default_rng(seed), (3, 5, 2, 1))
        flat = np.linalg.norm(np.concatenate([a.ravel() for a in w.arrays()]))
        assert metrics.nested_weight_norm(w) == pytest.approx(flat, rel=1e-6)

    @given(st.integers(0, 2**32 - 1), st.floats(-100, 100).filter(lambda c: abs(c) > 1e-3))
    def test_homogeneous(self, seed, c):
        w = random_weights(np.random.default_rng(seed))
        assert metrics.nested_weight_norm(w.map(lambda a: c * a)) == pytest.approx(
            abs(c) * metrics.nested_weight_norm(w), rel=1e-9)


class TestDivergence:
    def test_identical(self):
        w = init_model(0, (3, 4, 1))
        assert metrics.weight_divergence(w, w) == 0

    def test_antipodal(self):
        w = random_weights(np.random.default_rng(1))
        assert metrics.weight_divergence(w, w.map(np.negative)) == pytest.approx(2.0, rel=1e-12)

    def test_scalar_example(self):
        assert metrics.weight_divergence(scalar_model(3), scalar_model(1)) == 1.0

    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50).filter(lambda c: abs(c) > 1e-3))
    def test_scale_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        a, b = random_weights(rng), random_weights(rng)
        scaled = metrics.weight_divergence(a.map(lambda x: c * x), b.map(lambda x: c * x))
        assert scaled == pytest.approx(metrics.weight_divergence(a, b), rel=1e-9)

    def test_all_zero_pair(self):
        z = scalar_model(0)
        with pytest.raises(ValueError):
            metrics.weight_divergence(z, z)

    @settings(max_examples=20)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    def test_matrix_symmetric_zero_diagonal(self, seed, n):
        rng = np.random.default_rng(seed)
        models = {f"m{i}": random_weights(rng) for i in range(n)}
        keys, m = metrics.divergence_matrix(models)
        assert keys == list(models) and m.shape == (n, n)
        assert np.array_equal(m, m.T) and np.all(np.diag(m) == 0)
        assert len({m[i, j] for i in range(n) for j in range(i + 1, n)}) == n * (n - 1) // 2


class TestStats:
    def test_constant_vector_undefined_moments(self):
        s = metrics.field_stats([2.0, 2.0, 2.0])
        assert s.variance == 0 and math.isnan(s.skewness) and math.isnan(s.kurtosis)

    def test_hand_moments(self):
        s = metrics.field_stats([0, 0, 3])
        assert (s.mean, s.median, s.variance) == (1, 0, 2)

    def test_symmetric_zero_skew(self):
        assert metrics.field_stats([0, 1, 2]).skewness == 0

    @given(st.lists(st.floats(0, 100), min_size=3, max_size=50).filter(lambda v: np.ptp(v) > 1e-3))
    def test_matches_scipy(self, values):
        s = metrics.field_stats(values)
        assert s.variance == pytest.approx(np.var(values), rel=1e-9, abs=1e-12)
        assert s.skewness == pytest.approx(sps.skew(values), rel=1e-6, abs=1e-9)
        assert s.excess_kurtosis == pytest.approx(sps.kurtosis(values), rel=1e-6, abs=1e-9)
        assert s.kurtosis == pytest.approx(sps.kurtosis(values, fisher=False), rel=1e-6, abs=1e-9)

    def test_per_image_extremes(self):
        s = metrics.field_stats([1, 2], per_image_min=[0, 0.5], per_image_max=[4, 6])
        assert (s.min, s.max) == (0.25, 5)


class TestHistogram:
    @given(st.lists(st.floats(0, 10), min_size=1, max_size=100), st.integers(1, 30))
    def test_counts_sum(self, values, bins):
        edges, counts = metrics.error_histogram(values, bins)
        assert counts.sum() == len(values) and len(edges) == bins + 1

    def test_single_value(self):
        _, counts = metrics.error_histogram([3.0], 5)
        assert np.count_nonzero(counts) == 1

    def test_edge_convention(self):
        _, counts = metrics.error_histogram([0.0, 1.0, 2.0], 2, range=(0, 2))
        assert counts.tolist() == [1, 2]


class TestCsv:
    def test_eval_round_trip(self, tmp_path):
        rep = metrics.EvalReport(ZoneId.ZONE3, "adapFL", "test", np.array([0.1, 0.3]), np.array([0.2, 0.4]), 0.5)
        base = metrics.EvalReport(ZoneId.ZONE3, "COTREC", "test", np.array([0.4]), np.array([0.5]))
        metrics.write_eval_reports([base, rep], tmp_path / "r.csv")
        rows = metrics.read_eval_rows(tmp_path / "r.csv")
        assert math.isnan(rows[0]["skill_score"])
        assert rows[1] == {"zone": ZoneId.ZONE3, "regime": "adapFL", "split": "test", "n_images": 2,
                           "mse": rep.mse, "mae": rep.mae, "rmse": rep.rmse, "skill_score": 0.5}

    def test_stats_round_trip(self, tmp_path):
        rows = [(ZoneId.ZONE1, "train", metrics.field_stats([0, 0, 3])),
                (ZoneId.CENTRAL, "test", metrics.field_stats([1, 1]))]
        metrics.write_stats_reports(rows, tmp_path / "s.csv")
        back = metrics.read_stats_reports(tmp_path / "s.csv")
        assert back[0] == rows[0]
        assert back[1][2].mean == 1 and math.isnan(back[1][2].skewness)

    def test_matrix_and_histogram_round_trip(self, tmp_path):
        m = np.array([[0, 0.5], [0.5, 0]])
        metrics.write_matrix([ZoneId.ZONE1, ZoneId.CENTRAL], m, tmp_path / "m.csv")
        labels, back = metrics.read_matrix(tmp_path / "m.csv")
        assert labels == ["zone1", "central"] and np.array_equal(back, m)
        edges, counts = metrics.error_histogram([0.1, 0.2, 0.9], 3)
        metrics.write_histogram(edges, counts, tmp_path / "h.csv")
        e2, c2 = metrics.read_histogram(tmp_path / "h.csv")
        assert np.array_equal(e2, edges[:-1]) and np.array_equal(c2, counts)
