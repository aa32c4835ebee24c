import numpy as np
import pytest

from setgen.gaussian import VAR_FLOOR, fit_gaussian
from setgen.gmm import (
    WEIGHT_FLOOR,
    GmmModel,
    bic_score,
    fit_gmm_em,
    from_gaussian,
    gmm_logpdf,
    gmm_logpdf_many,
    load_model,
    responsibilities,
    save_model,
    select_by_bic,
)


def two_cluster_set(rng, n=3, per=40, distance=8.0):
    a = rng.normal(0.0, 1.0, size=(per, n))
    b = rng.normal(0.0, 1.0, size=(per, n)) + distance
    return np.vstack([a, b])


class TestLogpdf:
    def test_two_identical_components_collapse(self):
        rng = np.random.default_rng(0)
        mean = rng.normal(size=4)
        var = rng.uniform(0.3, 1.5, size=4)
        single = GmmModel(np.ones(1), mean[None], var[None])
        double = GmmModel(np.array([0.5, 0.5]), np.tile(mean, (2, 1)), np.tile(var, (2, 1)))
        z = rng.normal(size=4)
        assert gmm_logpdf(double, z) == pytest.approx(gmm_logpdf(single, z), abs=1e-12)

    def test_component_permutation_invariance(self):
        rng = np.random.default_rng(1)
        model = GmmModel(
            np.array([0.2, 0.3, 0.5]),
            rng.normal(size=(3, 4)),
            rng.uniform(0.2, 2.0, size=(3, 4)),
        )
        perm = [2, 0, 1]
        shuffled = GmmModel(model.weights[perm], model.means[perm], model.vars[perm])
        for _ in range(20):
            z = rng.normal(size=4)
            assert gmm_logpdf(model, z) == pytest.approx(gmm_logpdf(shuffled, z), abs=1e-12)

    def test_density_integrates_to_one(self):
        rng = np.random.default_rng(2)
        model = GmmModel(
            np.array([0.4, 0.6]),
            np.array([[0.0, 0.0], [2.0, 1.0]]),
            np.array([[0.5, 0.8], [0.6, 0.4]]),
        )
        lo, hi = -6.0, 8.0
        points = rng.uniform(lo, hi, size=(200_000, 2))
        mass = np.exp(gmm_logpdf_many(model, points)).mean() * (hi - lo) ** 2
        assert mass == pytest.approx(1.0, abs=0.02)


class TestResponsibilities:
    def test_equidistant_symmetric_components(self):
        model = GmmModel(
            np.array([0.5, 0.5]),
            np.array([[-1.0], [1.0]]),
            np.array([[0.7], [0.7]]),
        )
        resp = responsibilities(model, np.array([[0.0]]))
        np.testing.assert_allclose(resp, [[0.5, 0.5]], atol=1e-12)

    def test_single_component(self):
        model = GmmModel(np.ones(1), np.zeros((1, 2)), np.ones((1, 2)))
        resp = responsibilities(model, np.random.default_rng(0).normal(size=(5, 2)))
        np.testing.assert_array_equal(resp, np.ones((5, 1)))

    def test_far_point_saturates(self):
        model = GmmModel(
            np.array([0.5, 0.5]),
            np.array([[0.0], [20.0]]),
            np.array([[1.0], [1.0]]),
        )
        resp = responsibilities(model, np.array([[0.5]]))
        assert resp[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert resp[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        D = two_cluster_set(rng)
        model, resp, _ = fit_gmm_em(D, 2, seed=0)
        np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-10)


class TestEmFit:
    def test_single_component_matches_closed_form(self):
        rng = np.random.default_rng(4)
        D = rng.normal(size=(25, 3))
        model, _, _ = fit_gmm_em(D, 1, seed=0)
        closed = fit_gaussian(D)
        np.testing.assert_allclose(model.means[0], closed.mean, atol=1e-10)
        np.testing.assert_allclose(model.vars[0], closed.var, atol=1e-10)
        assert model.weights[0] == 1.0

    def test_recovers_separated_clusters(self):
        rng = np.random.default_rng(5)
        D = two_cluster_set(rng, n=3, per=60, distance=10.0)
        model, _, _ = fit_gmm_em(D, 2, seed=1)
        order = np.argsort(model.means[:, 0])
        np.testing.assert_allclose(model.means[order][0], D[:60].mean(axis=0), atol=0.05)
        np.testing.assert_allclose(model.means[order][1], D[60:].mean(axis=0), atol=0.05)
        np.testing.assert_allclose(model.weights, [0.5, 0.5], atol=0.02)

    def test_warm_start_from_truth_converges_fast(self):
        rng = np.random.default_rng(6)
        truth = GmmModel(
            np.array([0.5, 0.5]),
            np.array([[0.0, 0.0], [9.0, 9.0]]),
            np.ones((2, 2)),
        )
        assign = rng.integers(2, size=200)
        D = truth.means[assign] + rng.normal(size=(200, 2))
        _, _, trace = fit_gmm_em(D, 2, warm=truth)
        assert trace.converged
        assert trace.iterations <= 5

    def test_monotone_loglik_and_determinism(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(1, 5))
            k = int(rng.integers(1, 4))
            D = rng.normal(size=(int(rng.integers(k + 3, 40)), n)) * rng.uniform(0.5, 3.0)
            model_a, _, trace_a = fit_gmm_em(D, k, seed=3)
            model_b, _, trace_b = fit_gmm_em(D, k, seed=3)
            diffs = np.diff(trace_a.loglik)
            assert (diffs >= -1e-9).all()
            assert trace_a.loglik == trace_b.loglik
            np.testing.assert_array_equal(model_a.means, model_b.means)

    def test_floors_and_weight_sum_respected(self):
        rng = np.random.default_rng(8)
        D = rng.normal(size=(12, 2))
        model, _, _ = fit_gmm_em(D, 3, seed=5)
        assert model.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(model.weights >= WEIGHT_FLOOR * 0.999)
        assert np.all(model.vars >= VAR_FLOOR)

    def test_cold_start_needs_enough_points(self):
        with pytest.raises(ValueError):
            fit_gmm_em(np.zeros((2, 2)) + np.arange(2)[:, None], 3, seed=0)

    def test_warm_shape_mismatch_rejected(self):
        warm = GmmModel(np.ones(1), np.zeros((1, 2)), np.ones((1, 2)))
        with pytest.raises(ValueError):
            fit_gmm_em(np.random.default_rng(0).normal(size=(10, 2)), 2, warm=warm)


class TestBic:
    def test_score_arithmetic(self):
        assert bic_score(1, 2, 10, -30.0) == pytest.approx(4 * np.log(10.0) + 60.0)

    def test_prefers_single_component_on_tight_cluster(self):
        rng = np.random.default_rng(9)
        D = rng.normal(0.0, 1.0, size=(80, 2))
        _, chosen, _ = select_by_bic(D, [1, 2, 3], seed=0)
        assert chosen == 1

    def test_prefers_two_on_separated_clusters(self):
        rng = np.random.default_rng(10)
        D = two_cluster_set(rng, per=50, distance=10.0)
        _, chosen, _ = select_by_bic(D, [1, 2, 3], seed=0)
        assert chosen == 2

    def test_tie_breaks_toward_smaller_k(self):
        model, chosen, scores = select_by_bic(
            np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.2], [0.1, 0.9]]), [1], seed=0
        )
        assert chosen == 1 and model.k == 1 and set(scores) == {1}


class TestSerialization:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        model = GmmModel(
            np.array([0.25, 0.75]),
            rng.normal(size=(2, 3)),
            rng.uniform(0.1, 2.0, size=(2, 3)),
        )
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.weights, model.weights)
        np.testing.assert_array_equal(loaded.means, model.means)
        np.testing.assert_array_equal(loaded.vars, model.vars)

    def test_gaussian_stored_as_single_component(self, tmp_path):
        gauss = fit_gaussian(np.random.default_rng(12).normal(size=(10, 4)))
        path = tmp_path / "model.json"
        save_model(gauss, path)
        loaded = load_model(path)
        assert loaded.k == 1
        np.testing.assert_array_equal(loaded.means[0], gauss.mean)
