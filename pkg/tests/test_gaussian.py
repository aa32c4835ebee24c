import numpy as np
import pytest

from setgen.gaussian import (
    VAR_FLOOR,
    GaussianModel,
    fit_gaussian,
    gaussian_fit_grads,
    gaussian_logpdf,
    gaussian_logpdf_many,
)
from setgen.gmm import from_gaussian, gmm_logpdf


class TestFit:
    def test_two_point_closed_form(self):
        model = fit_gaussian([[0.0, 0.0], [2.0, 2.0]])
        np.testing.assert_allclose(model.mean, [1.0, 1.0])
        np.testing.assert_allclose(model.var, [1.0, 1.0])

    def test_single_point_hits_floor(self):
        model = fit_gaussian([[5.0, 5.0]])
        np.testing.assert_allclose(model.mean, [5.0, 5.0])
        np.testing.assert_allclose(model.var, [VAR_FLOOR, VAR_FLOOR])

    def test_monte_carlo_recovery(self):
        rng = np.random.default_rng(42)
        D = rng.normal(0.0, [1.0, 2.0], size=(1000, 2))
        model = fit_gaussian(D)
        assert np.abs(model.mean).max() < 0.1
        assert np.abs(model.var - [1.0, 4.0]).max() < 0.3

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            fit_gaussian(np.empty((0, 3)))

    def test_translation_equivariance(self):
        rng = np.random.default_rng(0)
        D = rng.normal(size=(12, 4))
        shift = rng.normal(size=4)
        base = fit_gaussian(D)
        moved = fit_gaussian(D + shift)
        np.testing.assert_allclose(moved.mean, base.mean + shift, atol=1e-12)
        np.testing.assert_allclose(moved.var, base.var, atol=1e-12)

    def test_fit_maximizes_likelihood(self):
        rng = np.random.default_rng(3)
        D = rng.normal(0.0, 1.0, size=(30, 3))
        model = fit_gaussian(D)
        assert np.all(model.var > VAR_FLOOR)  # no floor active on this data
        base = gaussian_logpdf_many(model, D).sum()
        for _ in range(200):
            delta = rng.normal(size=6)
            delta *= 1e-3 / np.linalg.norm(delta)
            var = model.var + delta[3:]
            if np.any(var <= 0):
                continue
            probe = GaussianModel(model.mean + delta[:3], var)
            assert gaussian_logpdf_many(probe, D).sum() <= base + 1e-12


class TestLogpdf:
    def test_at_mean_unit_var(self):
        model = GaussianModel(np.zeros(2), np.ones(2))
        assert gaussian_logpdf(model, np.zeros(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)

    def test_one_dim_unit_point(self):
        model = GaussianModel(np.zeros(1), np.ones(1))
        expected = -0.5 * np.log(2 * np.pi) - 0.5
        assert gaussian_logpdf(model, np.ones(1)) == pytest.approx(expected, abs=1e-12)

    def test_matches_single_component_mixture(self):
        rng = np.random.default_rng(7)
        model = GaussianModel(rng.normal(size=5), rng.uniform(0.2, 2.0, size=5))
        mixture = from_gaussian(model)
        for _ in range(100):
            z = rng.normal(size=5)
            assert gaussian_logpdf(model, z) == pytest.approx(gmm_logpdf(mixture, z), abs=1e-12)

    def test_dimension_mismatch(self):
        model = GaussianModel(np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            gaussian_logpdf(model, np.zeros(3))


class TestFitGrads:
    def test_mean_rate_is_one_over_n(self):
        grads = gaussian_fit_grads(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert grads.dmu_dd == pytest.approx(0.5)

    def test_variance_rate_closed_form(self):
        grads = gaussian_fit_grads(np.array([[0.0, 0.0], [2.0, 2.0]]))
        assert grads.dphi_dd[0, 0] == pytest.approx(-1.0)

    def test_rows_sum_to_zero(self):
        rng = np.random.default_rng(11)
        D = rng.normal(size=(9, 5))
        grads = gaussian_fit_grads(D)
        np.testing.assert_allclose(grads.dphi_dd.sum(axis=0), 0.0, atol=1e-12)

    def test_floored_coordinates_have_zero_gradient(self):
        D = np.array([[1.0, 0.0], [1.0, 2.0]])  # first coordinate is constant
        grads = gaussian_fit_grads(D)
        np.testing.assert_array_equal(grads.dphi_dd[:, 0], 0.0)
        assert np.any(grads.dphi_dd[:, 1] != 0.0)

    def test_matches_finite_differences(self):
        from setgen.gradcheck import check_gaussian_fit_grads

        result = check_gaussian_fit_grads(seed=5, trials=10)
        assert result.passed, result.line()
