import numpy as np
import pytest

from setgen.gaussian import VAR_FLOOR, gaussian_fit_grads
from setgen.gmm import GmmModel, fit_gmm_em, responsibilities
from setgen.gradcheck import _fit_tight, rel_error
from setgen.implicit import (
    ParamLayout,
    SingularSystemError,
    StationarityError,
    backprop_through_fit,
    coordinate_derivatives,
    cross_hessian_data,
    loglik_grad,
    loglik_hessian,
    solve_implicit,
)


def saturated_two_cluster(rng, n=3, per=20, distance=10.0):
    D = np.vstack(
        [rng.normal(0.0, 1.0, size=(per, n)), rng.normal(distance, 1.0, size=(per, n))]
    )
    model, resp, _ = _fit_tight(D, 2, seed=0)
    return D, model, resp


class TestCoordinateDerivatives:
    def test_at_mean_unit_sigma(self):
        d = coordinate_derivatives(0.0, 1.0, 0.0)
        assert d.dmumu == pytest.approx(-1.0)
        assert d.dmu == pytest.approx(0.0)
        assert d.dsig == pytest.approx(-1.0)

    def test_ratios_match_finite_differences(self):
        def g_value(mu, sigma, x):
            return float(coordinate_derivatives(mu, sigma, x).g)

        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(30):
            mu, sigma, x = rng.normal(), rng.uniform(0.4, 2.0), rng.normal()
            der = coordinate_derivatives(mu, sigma, x)
            g0 = g_value(mu, sigma, x)
            fd_mu = (g_value(mu + h, sigma, x) - g_value(mu - h, sigma, x)) / (2 * h)
            fd_sig = (g_value(mu, sigma + h, x) - g_value(mu, sigma - h, x)) / (2 * h)
            assert fd_mu / g0 == pytest.approx(der.dmu, rel=1e-6, abs=1e-6)
            assert fd_sig / g0 == pytest.approx(der.dsig, rel=1e-6, abs=1e-6)
            fd_mumu = (
                g_value(mu + h, sigma, x) - 2 * g0 + g_value(mu - h, sigma, x)
            ) / h**2
            fd_sigsig = (
                g_value(mu, sigma + h, x) - 2 * g0 + g_value(mu, sigma - h, x)
            ) / h**2
            fd_sigmu = (
                g_value(mu + h, sigma + h, x)
                - g_value(mu + h, sigma - h, x)
                - g_value(mu - h, sigma + h, x)
                + g_value(mu - h, sigma - h, x)
            ) / (4 * h**2)
            assert fd_mumu / g0 == pytest.approx(der.dmumu, rel=1e-4, abs=1e-4)
            assert fd_sigsig / g0 == pytest.approx(der.dsigsig, rel=1e-4, abs=1e-4)
            assert fd_sigmu / g0 == pytest.approx(der.dsigmu, rel=1e-4, abs=1e-4)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            coordinate_derivatives(0.0, 0.0, 1.0)


class TestHessian:
    def test_single_component_mean_curvature(self):
        rng = np.random.default_rng(1)
        D = rng.normal(size=(15, 3))
        model, resp, _ = _fit_tight(D, 1)
        H = loglik_hessian(model, D, resp).to_dense()
        lay = ParamLayout(1, 3)
        sigma2 = model.vars[0]
        for j in range(3):
            assert H[lay.mu(0, j), lay.mu(0, j)] == pytest.approx(-15.0 / sigma2[j], rel=1e-9)

    def test_saturated_cross_blocks_are_zero(self):
        rng = np.random.default_rng(2)
        D, model, resp = saturated_two_cluster(rng)
        blocks = loglik_hessian(model, D, resp, use_saturation=True)
        assert blocks.is_block_diagonal
        dense = loglik_hessian(model, D, resp, use_saturation=False)
        lay = blocks.layout
        full = dense.to_dense()
        # cross-component mean/mean couplings are below solve tolerance
        cross = full[lay.mu(0, 0), lay.mu(1, 0)]
        assert abs(cross) <= 1e-8

    def test_dense_assembly_matches_finite_differences(self):
        from setgen.gradcheck import check_hessian_blocks

        result = check_hessian_blocks(seed=11, trials=10)
        assert result.passed, result.line()

    def test_gradient_matches_finite_differences(self):
        from setgen.gradcheck import check_loglik_gradient

        result = check_loglik_gradient(seed=12, trials=10)
        assert result.passed, result.line()

    def test_sparse_and_dense_assembly_agree(self):
        rng = np.random.default_rng(3)
        D, model, resp = saturated_two_cluster(rng)
        sparse = loglik_hessian(model, D, resp, use_saturation=True).to_dense()
        dense = loglik_hessian(model, D, resp, use_saturation=False).to_dense()
        assert np.abs(sparse - dense).max() <= 1e-10


class TestCrossBlocks:
    def test_single_component_closed_form(self):
        rng = np.random.default_rng(4)
        D = rng.normal(size=(10, 2))
        model, resp, _ = _fit_tight(D, 1)
        B = cross_hessian_data(model, D, resp)
        lay = ParamLayout(1, 2)
        for i in range(10):
            for j in range(2):
                assert B[i, lay.mu(0, j), j] == pytest.approx(1.0 / model.vars[0, j], rel=1e-9)

    def test_saturated_entries_zero_and_match_dense(self):
        rng = np.random.default_rng(5)
        D, model, resp = saturated_two_cluster(rng)
        sparse = cross_hessian_data(model, D, resp, use_saturation=True)
        dense = cross_hessian_data(model, D, resp, use_saturation=False)
        assert np.abs(sparse - dense).max() <= 1e-8
        lay = ParamLayout(model.k, model.dim)
        # an observation owned by component 0 leaves component 1 rows at zero
        owner = responsibilities(model, D).argmax(axis=1)
        obs = int(np.flatnonzero(owner == 0)[0])
        assert np.abs(sparse[obs, lay.mu_slice, :].reshape(2, -1)[1]).max() == 0.0

    def test_matches_finite_differences(self):
        from setgen.gradcheck import check_cross_blocks

        result = check_cross_blocks(seed=13, trials=10)
        assert result.passed, result.line()


class TestSolve:
    def test_single_component_equals_closed_form(self):
        from setgen.gradcheck import check_implicit_closed_form

        result = check_implicit_closed_form(seed=14, trials=25)
        assert result.passed, result.line()

    def test_matches_refit_oracle(self):
        from setgen.gradcheck import check_implicit_refit

        result = check_implicit_refit(seed=15, trials=10)
        assert result.passed, result.line()

    def test_sparse_and_dense_solves_agree(self):
        rng = np.random.default_rng(6)
        D, model, resp = saturated_two_cluster(rng)
        sparse = solve_implicit(model, D, resp, use_saturation=True)
        dense = solve_implicit(model, D, resp, use_saturation=False)
        assert sparse.layout.m == dense.layout.m
        assert np.abs(sparse.dtheta_dd - dense.dtheta_dd).max() <= 1e-10

    def test_bordered_residual_small(self):
        rng = np.random.default_rng(7)
        D, model, resp = saturated_two_cluster(rng, per=12)
        fits = solve_implicit(model, D, resp, use_saturation=False)
        lay = fits.layout
        H = loglik_hessian(model, D, resp, use_saturation=False).to_dense()
        K = np.zeros((lay.m + 1, lay.m + 1))
        K[: lay.m, : lay.m] = H
        K[lay.weight_slice, lay.m] = 1.0
        K[lay.m, lay.weight_slice] = 1.0
        B = cross_hessian_data(model, D, resp, use_saturation=False)
        rhs = np.zeros((lay.m + 1, D.size))
        rhs[: lay.m] = -np.moveaxis(B, 1, 0).reshape(lay.m, D.size)
        sigma = np.sqrt(model.vars).reshape(-1)
        sol = np.vstack(
            [
                fits.dtheta_dd.reshape(lay.m, D.size),
                fits.dlambda_dd.reshape(1, D.size),
            ]
        )
        sol[lay.sig_slice] /= 2.0 * sigma[:, None]  # back to stddev rows
        residual = np.abs(K @ sol - rhs).max()
        assert residual <= 1e-8 * max(np.abs(rhs).max(), 1.0)

    def test_weight_rows_sum_to_zero(self):
        rng = np.random.default_rng(8)
        D, model, resp = saturated_two_cluster(rng)
        fits = solve_implicit(model, D, resp)
        weight_rows = fits.dtheta_dd[fits.layout.weight_slice]
        np.testing.assert_allclose(weight_rows.sum(axis=0), 0.0, atol=1e-10)

    def test_fast_backprop_matches_full_matrix(self):
        rng = np.random.default_rng(9)
        D, model, resp = saturated_two_cluster(rng, per=8)
        lay = ParamLayout(model.k, model.dim)
        dmu = rng.normal(size=(model.k, model.dim))
        dvar = rng.normal(size=(model.k, model.dim))
        dw = rng.normal(size=model.k)
        fast = backprop_through_fit(model, D, resp, dmu, dvar, dw)
        g = np.concatenate([dmu.ravel(), dvar.ravel(), dw])
        full = np.einsum("a,aos->os", g, solve_implicit(model, D, resp).dtheta_dd)
        np.testing.assert_allclose(fast, full, atol=1e-12)

    def test_floor_active_is_rejected(self):
        D = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 3.0]])  # flat first coord
        model, resp, _ = _fit_tight(D, 1)
        assert model.vars[0, 0] == VAR_FLOOR
        with pytest.raises(StationarityError, match="floor"):
            solve_implicit(model, D, resp)

    def test_unconverged_fit_is_rejected(self):
        rng = np.random.default_rng(10)
        D = rng.normal(size=(20, 2)) + np.array([3.0, -1.0])
        model = GmmModel(np.ones(1), np.zeros((1, 2)), np.ones((1, 2)))  # nowhere near a fit
        with pytest.raises(StationarityError, match="residual"):
            solve_implicit(model, D, responsibilities(model, D))

    def test_singular_system_names_component(self):
        rng = np.random.default_rng(11)
        D = rng.normal(size=(16, 2))
        base, _, _ = _fit_tight(D, 1)
        # two coincident components: the split of weight between them is free
        model = GmmModel(
            np.array([0.5, 0.5]),
            np.tile(base.means[0], (2, 1)),
            np.tile(base.vars[0], (2, 1)),
        )
        resp = responsibilities(model, D)
        with pytest.raises(SingularSystemError):
            solve_implicit(model, D, resp, use_saturation=False)

    def test_inconsistent_responsibilities_rejected(self):
        rng = np.random.default_rng(12)
        D, model, resp = saturated_two_cluster(rng)
        bad = resp.copy()
        bad[0] = [0.5, 0.5]
        with pytest.raises(ValueError, match="inconsistent"):
            solve_implicit(model, D, bad)


class TestSaturationStatistics:
    def test_well_separated_clusters_saturate(self):
        rng = np.random.default_rng(13)
        D, model, resp = saturated_two_cluster(rng, per=50, distance=8.0)
        saturated = (resp.max(axis=1) >= 1.0 - 1e-12).mean()
        assert saturated >= 0.95
