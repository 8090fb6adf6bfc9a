import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from conftest import grid_mle, make_dataset
from stepselect.baselines import (ClogitFit, ConvergenceError, FormulaSpec,
                                  RankDeficientError, SeparationError, SplineFit, SplineSettings,
                                  fit_clogit_glm, fit_clogit_spline, model_from_dict, model_to_dict,
                                  save_model, spline_curve, wald_inference)
from stepselect.simkit import SelectionSpec, simulate_selection, transform


def fixed_fit(est, se):
    return ClogitFit(FormulaSpec((0,)), ("x1",), np.array([est]), np.array([[se * se]]), True, 1, 0.0)


@pytest.fixture(scope="module")
def linear_data():
    return simulate_selection(SelectionSpec(1, (1.0,), n_strata=2000), 31)


@pytest.fixture(scope="module")
def three_feature_data():
    return simulate_selection(SelectionSpec(3, (1.0, -0.5, 0.0), interactions=((0, 1, 1.0),),
                                            n_strata=1500), 32)


class TestFormula:
    def test_parse(self):
        f = FormulaSpec.parse("x1 + x3 + x1:x2", ["x1", "x2", "x3"])
        assert f.main_effects == (0, 2)
        assert f.interactions == ((0, 1),)
        assert f.term_names(["x1", "x2", "x3"]) == ["x1", "x3", "x1:x2"]

    def test_star_expands(self):
        f = FormulaSpec.parse("x2*x1", ["x1", "x2"])
        assert f.main_effects == (1, 0)
        assert f.interactions == ((0, 1),)

    @pytest.mark.parametrize("text", ["", "x9", "x1:x1"])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            FormulaSpec.parse(text, ["x1", "x2"])

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            FormulaSpec((0, 0))
        with pytest.raises(ValueError):
            FormulaSpec((0,), ((0, 1), (1, 0)))

    def test_design(self):
        X = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(FormulaSpec((2,), ((0, 1),)).design(X), [[3.0, 2.0]])

    def test_all_pairs_count(self):
        assert FormulaSpec.all_pairs(9).n_terms == 45


class TestGlm:
    def test_recovers_slope(self, linear_data):
        fit = fit_clogit_glm(linear_data)
        w = wald_inference(fit)[0]
        assert fit.converged
        assert abs(w.estimate - 1.0) <= 3 * w.se

    def test_no_information(self):
        X = np.repeat(np.arange(6.0), 4)
        d = make_dataset(X, 4)
        fit = fit_clogit_glm(d)
        assert fit.coefficients[0] == 0.0
        assert fit.loglik == pytest.approx(-6 * math.log(4), rel=1e-12)
        assert math.isinf(fit.covariance[0, 0])

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_grid_oracle(self, seed):
        d = simulate_selection(SelectionSpec(1, (0.8,), n_controls=4, n_strata=50), 40 + seed)
        fit = fit_clogit_glm(d)
        oracle = grid_mle(d.X[:, 0], 5, d.strata.case_col, step=0.001)
        assert abs(fit.coefficients[0] - oracle) <= 0.002

    def test_gradient_at_optimum(self, three_feature_data):
        fit = fit_clogit_glm(three_feature_data, FormulaSpec.all_pairs(3))
        assert fit.gradient_norm < 1e-8

    def test_covariance_psd(self, three_feature_data):
        fit = fit_clogit_glm(three_feature_data, FormulaSpec.all_pairs(3))
        np.testing.assert_allclose(fit.covariance, fit.covariance.T)
        assert np.linalg.eigvalsh(fit.covariance).min() >= 0

    def test_stratum_constant_shift(self, three_feature_data):
        d = three_feature_data
        shift = np.random.default_rng(0).normal(0, 5, d.n_strata)[d.stratum_id]
        X = np.array(d.X)
        X[:, 1] += shift
        a = fit_clogit_glm(d).coefficients
        b = fit_clogit_glm(d.with_X(X)).coefficients
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_reordering_invariance(self, three_feature_data):
        d = three_feature_data
        rng = np.random.default_rng(1)
        order = rng.permutation(d.n_records)
        a = fit_clogit_glm(d, FormulaSpec.all_pairs(3)).coefficients
        b = fit_clogit_glm(d.take_rows(order), FormulaSpec.all_pairs(3)).coefficients
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_interaction_recovered(self, three_feature_data):
        fit = fit_clogit_glm(three_feature_data, FormulaSpec((0, 1, 2), ((0, 1),)))
        w = {r.term: r for r in wald_inference(fit)}
        assert abs(w["x1:x2"].estimate - 1.0) < 3 * w["x1:x2"].se

    def test_rank_deficiency_names_columns(self, rng):
        x = rng.normal(size=40)
        d = make_dataset(np.column_stack([x, 2 * x]), 4)
        with pytest.raises(RankDeficientError) as e:
            fit_clogit_glm(d)
        assert len(e.value.columns) == 1
        assert e.value.columns[0] in ("x1", "x2")

    def test_separation(self):
        X = np.tile([1.0, 0.0, 0.0], 10)
        with pytest.raises(SeparationError):
            fit_clogit_glm(make_dataset(X, 3))

    def test_large_finite_slope_not_flagged(self, rng):
        d = simulate_selection(SelectionSpec(1, (6.0,), n_controls=4, n_strata=400), 5)
        fit = fit_clogit_glm(d)
        assert fit.converged and fit.coefficients[0] > 4

    def test_iteration_cap_reports_non_convergence(self, linear_data):
        fit = fit_clogit_glm(linear_data, max_iter=0)
        assert not fit.converged
        with pytest.raises(ConvergenceError):
            wald_inference(fit)


class TestWald:
    def test_null_point(self):
        w = wald_inference(fixed_fit(0.0, 1.0))[0]
        assert w.z == 0.0
        assert w.p_value == 1.0

    def test_definitional_quantile(self):
        w = wald_inference(fixed_fit(1.96, 1.0))[0]
        assert w.p_value == pytest.approx(0.05, abs=1e-3)
        assert (w.ci_low, w.ci_high) == pytest.approx((0.0, 3.92))

    def test_needs_convergence(self):
        fit = fixed_fit(1.0, 1.0)
        fit.converged = False
        with pytest.raises(ConvergenceError):
            wald_inference(fit)

    def test_infinite_variance(self):
        w = wald_inference(fixed_fit(0.0, math.inf))[0]
        assert w.p_value == 1.0


class TestSpline:
    def test_linear_truth(self, linear_data):
        fit = fit_clogit_spline(linear_data, 0)
        x = linear_data.X[:, 0]
        grid = np.linspace(*np.quantile(x, [0.05, 0.95]), 200)
        line = grid - grid.mean()
        assert np.max(np.abs(spline_curve(fit, grid) - line)) <= 0.15

    def test_hump_truth(self):
        d = simulate_selection(SelectionSpec(1, (1.0,), nonlinear_transforms=((0, "hump"),)), 33)
        fit = fit_clogit_spline(d, 0)
        grid = np.linspace(*np.quantile(d.X[:, 0], [0.05, 0.95]), 200)
        truth = transform("hump")(grid)
        truth -= truth.mean()
        assert np.mean((spline_curve(fit, grid) - truth) ** 2) < 0.25 * np.var(truth)

    def test_infinite_penalty_is_affine(self, linear_data):
        fit = fit_clogit_spline(linear_data, 0, SplineSettings(penalty_grid=(1e9,)))
        assert fit.converged
        lo, hi = fit.bounds
        y = spline_curve(fit, np.linspace(lo, hi, 101))
        assert np.max(np.abs(np.diff(y, 2))) < 1e-4

    def test_single_value_grid_reproduces_fit(self, linear_data):
        a = fit_clogit_spline(linear_data, 0, SplineSettings(penalty_grid=(3.0,)))
        b = fit_clogit_spline(linear_data, 0, SplineSettings(penalty_grid=(3.0,), n_folds=3, seed=9))
        np.testing.assert_array_equal(a.coefficients, b.coefficients)
        assert a.penalty == 3.0 and a.cv_nll == {}

    def test_coefficients_sum_to_zero(self, linear_data):
        fit = fit_clogit_spline(linear_data, 0, SplineSettings(penalty_grid=(1.0,)))
        assert abs(fit.coefficients.sum()) < 1e-10
        assert len(fit.coefficients) == len(fit.knots) - fit.basis_degree - 1

    def test_zero_coefficients(self):
        t = np.r_[[0.0] * 4, 0.5, [1.0] * 4]
        fit = SplineFit(0, ("x1",), t, 3, np.zeros(5), 1.0, 0.0)
        np.testing.assert_array_equal(spline_curve(fit, np.linspace(0, 1, 7)), 0.0)

    def test_parabola_by_interpolation(self):
        t = np.r_[[-1.0] * 4, -0.3, 0.2, 0.6, [1.0] * 4]
        x = np.linspace(-1, 1, 50)
        B = BSpline.design_matrix(x, t, 3).toarray()
        c = np.linalg.lstsq(B, x ** 2, rcond=None)[0]
        fit = SplineFit(0, ("x1",), t, 3, c, 0.0, 0.0)
        grid = np.linspace(-0.9, 0.9, 37)
        np.testing.assert_allclose(spline_curve(fit, grid), grid ** 2 - np.mean(grid ** 2), atol=1e-12)

    def test_grid_beyond_range(self):
        fit = SplineFit(0, ("x1",), np.r_[[0.0] * 4, [1.0] * 4], 3, np.zeros(4), 1.0, 0.0)
        with pytest.raises(ValueError):
            spline_curve(fit, [0.5, 1.5])

    def test_too_few_distinct_values(self):
        d = make_dataset(np.tile([0.0, 1.0], 50), 2)
        with pytest.raises(ValueError, match="distinct"):
            fit_clogit_spline(d, 0)

    def test_penalty_choice_from_grid(self, linear_data):
        s = SplineSettings(penalty_grid=(0.01, 1.0, 100.0))
        fit = fit_clogit_spline(linear_data, 0, s)
        assert fit.penalty in s.penalty_grid
        assert set(fit.cv_nll) == set(s.penalty_grid)


class TestSerialization:
    def test_glm_roundtrip(self, three_feature_data, tmp_path):
        fit = fit_clogit_glm(three_feature_data, FormulaSpec.all_pairs(3))
        back = model_from_dict(model_to_dict(fit))
        np.testing.assert_array_equal(back.coefficients, fit.coefficients)
        np.testing.assert_array_equal(back.score_rows(three_feature_data), fit.score_rows(three_feature_data))
        save_model(fit, tmp_path / "g.json")

    def test_spline_roundtrip(self, linear_data):
        fit = fit_clogit_spline(linear_data, 0, SplineSettings(penalty_grid=(1.0, 10.0)))
        back = model_from_dict(model_to_dict(fit))
        np.testing.assert_array_equal(back.score_rows(linear_data), fit.score_rows(linear_data))
        assert back.cv_nll == fit.cv_nll

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            model_from_dict({"kind": "dnn"})


@settings(max_examples=15)
@given(st.integers(0, 10 ** 6), st.floats(-1.5, 1.5))
def test_glm_order_invariance_property(seed, beta):
    d = simulate_selection(SelectionSpec(1, (beta,), n_controls=3, n_strata=80), seed)
    perm = np.random.default_rng(seed).permutation(d.n_strata)
    a = fit_clogit_glm(d).coefficients
    b = fit_clogit_glm(d.take_strata(perm)).coefficients
    np.testing.assert_allclose(a, b, atol=1e-6)
