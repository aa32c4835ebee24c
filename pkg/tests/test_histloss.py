import numpy as np
import pytest

from setgen.histloss import (
    DegenerateScoreRange,
    RelevanceSets,
    build_histograms,
    histogram_loss,
    histogram_loss_backward,
    loss_and_grads,
    pairwise_violation_rate,
    triangular_kernel,
)


class TestKernel:
    def test_peak(self):
        assert triangular_kernel(0.0, 2.0) == 1.0

    def test_support_edge(self):
        assert triangular_kernel(1.0, 2.0) == 0.0

    def test_linear_midpoint(self):
        assert triangular_kernel(0.5, 2.0) == 0.5

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            triangular_kernel(0.0, 0.0)


class TestBuild:
    def test_scores_on_nodes(self):
        pair = build_histograms(RelevanceSets([0.0, 1.0], [0.0, 1.0]), bins=2)
        np.testing.assert_array_equal(pair.nodes, [0.0, 1.0])
        np.testing.assert_allclose(pair.h_plus, [0.5, 0.5])
        np.testing.assert_allclose(pair.h_minus, [0.5, 0.5])

    def test_midpoint_splits_evenly(self):
        pair = build_histograms(RelevanceSets([0.0, 0.5, 1.0], [0.0, 1.0]), bins=2)
        np.testing.assert_allclose(pair.h_plus, [0.5, 0.5])

    def test_partition_of_unity(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            rel = RelevanceSets(rng.normal(size=17), rng.normal(size=23))
            pair = build_histograms(rel, bins=10)
            assert pair.h_plus.sum() == pytest.approx(1.0, abs=1e-10)
            assert pair.h_minus.sum() == pytest.approx(1.0, abs=1e-10)

    def test_degenerate_range_raises(self):
        with pytest.raises(DegenerateScoreRange):
            build_histograms(RelevanceSets([1.0, 1.0], [1.0]), bins=4)


class TestLoss:
    def test_well_ordered_is_zero(self):
        rel = RelevanceSets([10.0, 11.0, 12.0], [0.0, 1.0])
        assert histogram_loss(build_histograms(rel, bins=50)) == pytest.approx(0.0, abs=1e-12)

    def test_inverted_is_one(self):
        rel = RelevanceSets([0.0, 1.0], [10.0, 11.0, 12.0])
        assert histogram_loss(build_histograms(rel, bins=50)) == pytest.approx(1.0, abs=1e-12)

    def test_identical_distributions_near_half(self):
        rng = np.random.default_rng(1)
        rel = RelevanceSets(rng.normal(size=200), rng.normal(size=200))
        loss = histogram_loss(build_histograms(rel, bins=512))
        assert abs(loss - 0.5) <= 0.05

    def test_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            rel = RelevanceSets(
                rng.normal(rng.uniform(-3, 3), 1.0, size=11),
                rng.normal(0.0, 1.0, size=13),
            )
            loss = histogram_loss(build_histograms(rel, bins=16))
            assert 0.0 <= loss <= 1.0

    def test_tracks_pairwise_violation_rate(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            rel = RelevanceSets(
                rng.normal(rng.uniform(-1.5, 1.5), 1.0, size=200),
                rng.normal(0.0, 1.0, size=200),
            )
            loss = histogram_loss(build_histograms(rel, bins=512))
            assert abs(loss - pairwise_violation_rate(rel)) <= 0.02

    def test_affine_rescaling_invariance(self):
        rng = np.random.default_rng(4)
        rel = RelevanceSets(rng.normal(size=30), rng.normal(size=40))
        base = histogram_loss(build_histograms(rel, bins=32))
        scaled = RelevanceSets(3.7 * rel.r_plus + 11.0, 3.7 * rel.r_minus + 11.0)
        assert histogram_loss(build_histograms(scaled, bins=32)) == pytest.approx(base, abs=1e-10)


class TestBackward:
    def test_plateau_has_zero_gradients(self):
        rel = RelevanceSets([10.0, 11.0, 12.0], [0.0, 1.0])
        gp, gm, degenerate = histogram_loss_backward(rel, bins=50)
        assert not degenerate
        np.testing.assert_array_equal(gp, 0.0)
        np.testing.assert_array_equal(gm, 0.0)

    def test_matches_finite_differences(self):
        from setgen.gradcheck import check_histogram_gradients

        result = check_histogram_gradients(seed=5, trials=40)
        assert result.passed, result.line()

    def test_monotone_signs_on_interior_scores(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            rel = RelevanceSets(
                rng.normal(0.5, 1.0, size=20), rng.normal(0.0, 1.0, size=20)
            )
            gp, gm, _ = histogram_loss_backward(rel, bins=24)
            merged = np.concatenate([rel.r_plus, rel.r_minus])
            lo, hi = merged.min(), merged.max()
            interior_p = (rel.r_plus > lo) & (rel.r_plus < hi)
            interior_m = (rel.r_minus > lo) & (rel.r_minus < hi)
            assert np.all(gp[interior_p] <= 1e-15)
            assert np.all(gm[interior_m] >= -1e-15)

    def test_degenerate_flag_and_zero_gradients(self):
        rel = RelevanceSets([2.0, 2.0], [2.0])
        gp, gm, degenerate = histogram_loss_backward(rel, bins=8)
        assert degenerate
        np.testing.assert_array_equal(gp, 0.0)
        np.testing.assert_array_equal(gm, 0.0)
        loss, _, _, flag = loss_and_grads(rel, bins=8)
        assert flag and loss == 0.5
