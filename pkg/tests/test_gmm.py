import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivx.errors import DataError, FormatError
from ivx.gmm import (
    DiagonalGmm,
    component_log_densities,
    default_var_floor,
    em_fit,
    kmeans_init,
    load_gmm,
    log_likelihood,
    posterior_responsibilities,
    save_gmm,
    train_ubm,
)


def _random_gmm(rng, c, d):
    w = rng.uniform(0.2, 1.0, c)
    return DiagonalGmm(w / w.sum(), rng.normal(0, 2, (c, d)), rng.uniform(0.3, 2.0, (c, d)))


def _naive_density(gmm, frame):
    """Mixture density by explicit products over dimensions."""
    total = 0.0
    for c in range(gmm.n_components):
        p = gmm.weights[c]
        for k in range(gmm.dim):
            var = gmm.variances[c, k]
            p *= math.exp(-0.5 * (frame[k] - gmm.means[c, k]) ** 2 / var) / math.sqrt(2 * math.pi * var)
        total += p
    return total


def _two_clouds(rng, n=400, sep=8.0):
    a = rng.normal([-sep / 2, 0.0], 0.5, (n, 2))
    b = rng.normal([sep / 2, 1.0], 0.5, (n, 2))
    return np.vstack([a, b]), np.array([[-sep / 2, 0.0], [sep / 2, 1.0]])


class TestDiagonalGmm:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(DataError):
            DiagonalGmm([0.5, 0.6], np.zeros((2, 1)), np.ones((2, 1)))

    def test_variances_positive(self):
        with pytest.raises(DataError):
            DiagonalGmm([1.0], np.zeros((1, 2)), np.array([[1.0, 0.0]]))

    def test_shapes(self):
        with pytest.raises(DataError):
            DiagonalGmm([1.0], np.zeros((1, 2)), np.ones((1, 3)))

    def test_file_round_trip(self, tmp_path):
        gmm = _random_gmm(np.random.default_rng(0), 3, 4)
        save_gmm(tmp_path / "u.ivxg", gmm)
        back = load_gmm(tmp_path / "u.ivxg")
        np.testing.assert_array_equal(back.weights, gmm.weights)
        np.testing.assert_array_equal(back.means, gmm.means)
        np.testing.assert_array_equal(back.variances, gmm.variances)
        assert back.fingerprint() == gmm.fingerprint()

    def test_file_layout(self):
        gmm = DiagonalGmm([1.0], [[1.0, 2.0]], [[3.0, 4.0]])
        data = gmm.to_bytes()
        assert data[:4] == b"IVXG"
        np.testing.assert_array_equal(np.frombuffer(data[16:], "<f8"), [1.0, 1.0, 2.0, 3.0, 4.0])

    def test_truncated_file(self):
        data = _random_gmm(np.random.default_rng(0), 2, 2).to_bytes()
        with pytest.raises(FormatError):
            DiagonalGmm.from_bytes(data[:-8])


class TestLogLikelihood:
    def test_standard_normal_at_mode(self):
        gmm = DiagonalGmm([1.0], [[0.0]], [[1.0]])
        assert log_likelihood(gmm, [[0.0]]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)

    def test_empty(self):
        gmm = _random_gmm(np.random.default_rng(1), 3, 2)
        assert log_likelihood(gmm, np.empty((0, 2))) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            log_likelihood(_random_gmm(np.random.default_rng(1), 2, 3), np.zeros((4, 2)))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), c=st.integers(1, 4), d=st.integers(1, 5), t=st.integers(1, 50))
    def test_matches_naive_density(self, seed, c, d, t):
        rng = np.random.default_rng(seed)
        gmm = _random_gmm(rng, c, d)
        x = rng.normal(0, 2, (t, d))
        expected = sum(math.log(_naive_density(gmm, row)) for row in x)
        assert log_likelihood(gmm, x) == pytest.approx(expected, rel=1e-10, abs=1e-10)

    def test_far_frames_stay_finite(self):
        gmm = _random_gmm(np.random.default_rng(2), 3, 2)
        assert np.isfinite(log_likelihood(gmm, [[1e3, -1e3]]))


class TestResponsibilities:
    def test_single_component(self):
        gmm = DiagonalGmm([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        np.testing.assert_array_equal(posterior_responsibilities(gmm, np.random.default_rng(0).normal(size=(5, 2))), 1.0)

    def test_equidistant_frame(self):
        gmm = DiagonalGmm([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]])
        np.testing.assert_allclose(posterior_responsibilities(gmm, [[0.0]]), [[0.5, 0.5]], atol=1e-15)

    def test_matches_direct_ratio(self):
        rng = np.random.default_rng(5)
        gmm = _random_gmm(rng, 4, 3)
        x = rng.normal(0, 1.5, (30, 3))
        gamma = posterior_responsibilities(gmm, x)
        for t in range(30):
            parts = []
            for c in range(4):
                single = DiagonalGmm([1.0], gmm.means[c:c + 1], gmm.variances[c:c + 1])
                parts.append(gmm.weights[c] * _naive_density(single, x[t]))
            np.testing.assert_allclose(gamma[t], np.array(parts) / sum(parts), atol=1e-10)

    def test_no_nan_under_underflow(self):
        gmm = DiagonalGmm([0.5, 0.5], [[0.0], [1.0]], [[1e-4], [1e-4]])
        gamma = posterior_responsibilities(gmm, [[500.0], [-500.0]])
        assert np.all(np.isfinite(gamma))
        np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(gamma[0], [0.0, 1.0], atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), c=st.integers(1, 6), scale=st.floats(0.1, 100.0))
    def test_rows_sum_to_one(self, seed, c, scale):
        rng = np.random.default_rng(seed)
        gmm = _random_gmm(rng, c, 3)
        gamma = posterior_responsibilities(gmm, rng.normal(0, scale, (40, 3)))
        np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-10)
        assert gamma.min() >= 0.0 and gamma.max() <= 1.0

    def test_log_densities_shape(self):
        gmm = _random_gmm(np.random.default_rng(0), 3, 2)
        assert component_log_densities(gmm, np.zeros((7, 2))).shape == (7, 3)


class TestKmeansInit:
    def test_single_cluster(self):
        x = np.random.default_rng(0).normal(3.0, 1.0, (100, 2))
        gmm = kmeans_init(x, 1)
        np.testing.assert_allclose(gmm.means[0], x.mean(axis=0), atol=1e-12)
        assert gmm.weights[0] == 1.0

    def test_two_clouds_against_exhaustive_assignment(self):
        rng = np.random.default_rng(1)
        x, _ = _two_clouds(rng)
        gmm = kmeans_init(x, 2, seed=3)
        # oracle: best split by the sign of the first coordinate
        left, right = x[x[:, 0] < 0].mean(axis=0), x[x[:, 0] >= 0].mean(axis=0)
        got = gmm.means[np.argsort(gmm.means[:, 0])]
        np.testing.assert_allclose(got, [left, right], atol=1e-9)

    def test_deterministic(self):
        x = np.random.default_rng(2).normal(size=(300, 3))
        a, b = kmeans_init(x, 5, seed=7), kmeans_init(x, 5, seed=7)
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.variances, b.variances)

    def test_duplicate_points_do_not_leave_empty_clusters(self):
        x = np.vstack([np.zeros((20, 2)), np.ones((3, 2))])
        gmm = kmeans_init(x, 4, seed=0)
        assert np.all(gmm.weights > 0)
        assert np.all(gmm.variances > 0)

    def test_too_few_frames(self):
        with pytest.raises(DataError):
            kmeans_init(np.zeros((3, 2)), 4)


class TestEm:
    def test_single_gaussian_closed_form(self):
        x = np.random.default_rng(3).normal([1.0, -2.0], [0.5, 2.0], (500, 2))
        init = DiagonalGmm([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        gmm, trace = em_fit(init, x, iters=1)
        np.testing.assert_allclose(gmm.means[0], x.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(gmm.variances[0], x.var(axis=0), rtol=1e-10)
        assert trace.size == 2

    def test_variance_floor(self):
        x = np.c_[np.zeros(50), np.random.default_rng(0).normal(size=50)]
        init = DiagonalGmm([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        gmm, _ = em_fit(init, x, iters=2, var_floor=0.01)
        assert gmm.variances[0, 0] == 0.01

    def test_recovers_separated_means(self):
        rng = np.random.default_rng(4)
        x, truth = _two_clouds(rng, n=1000)
        gmm, trace = train_ubm(x, 2, iters=20, seed=0)
        got = gmm.means[np.argsort(gmm.means[:, 0])]
        np.testing.assert_allclose(got, truth, atol=0.1)
        np.testing.assert_allclose(gmm.weights, 0.5, atol=0.01)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), c=st.integers(1, 6))
    def test_trace_nondecreasing(self, seed, c):
        rng = np.random.default_rng(seed)
        x = np.vstack([rng.normal(rng.normal(0, 3, 2), 1.0, (60, 2)) for _ in range(3)])
        _, trace = train_ubm(x, c, iters=25, seed=seed, tol=0.0)
        slack = 1e-6 * np.abs(trace[:-1])
        assert np.all(np.diff(trace) >= -slack)

    def test_bitwise_deterministic(self):
        x = np.random.default_rng(8).normal(size=(400, 3))
        a, ta = train_ubm(x, 4, seed=1)
        b, tb = train_ubm(x, 4, seed=1)
        assert a.to_bytes() == b.to_bytes()
        np.testing.assert_array_equal(ta, tb)

    def test_block_partition_matches(self):
        x = np.random.default_rng(9).normal(size=(300, 2))
        init = kmeans_init(x, 3, seed=0)
        a, ta = em_fit(init, x, iters=5, block_size=64)
        b, tb = em_fit(init, x, iters=5, block_size=10_000)
        np.testing.assert_allclose(a.means, b.means, atol=1e-12)
        np.testing.assert_allclose(ta, tb, rtol=1e-12)

    def test_starved_component_reinitialized(self):
        x = np.random.default_rng(0).normal(0, 1, (200, 1))
        init = DiagonalGmm([0.5, 0.5], [[0.0], [1e4]], [[1.0], [1e-2]])
        with pytest.warns(RuntimeWarning, match="reinitializing"):
            gmm, _ = em_fit(init, x, iters=1)
        assert abs(gmm.means[1, 0]) < 10

    def test_default_floor(self):
        x = np.random.default_rng(0).normal(0, [1.0, 10.0], (1000, 2))
        np.testing.assert_allclose(default_var_floor(x), 1e-3 * x.var(axis=0))
