"""Partial-likelihood engine against closed-form, brute-force, and external fits."""

import math

import numpy as np
import pytest

from imtkit.core import AnalysisDataset
from imtkit.cox import CoxOptions, FitResult, _CoxProblem, fit_cox, robust_variance
from imtkit.errors import (
    ClusterError,
    ConstantCovariateError,
    EstimationError,
    MonotoneLikelihoodError,
    NoEventsError,
    ParameterError,
)

from _oracles import grid_maximize, naive_loglik, random_dataset

statsmodels = pytest.importorskip("statsmodels.api")


def small_dataset():
    """Four subjects, one covariate; the score equation reduces to
    1 = u/(u+1) + u/(u+2) with u = exp(beta), i.e. u^2 = 2."""
    return AnalysisDataset(
        cluster=np.arange(4),
        start=np.zeros(4),
        stop=np.array([1.0, 2.0, 3.0, 4.0]),
        event=np.array([True, True, False, False]),
        covariates=np.array([[1.0], [0.0], [1.0], [0.0]]),
        covariate_names=("x",),
    )


class TestClosedForm:
    @pytest.mark.parametrize("ties", ["efron", "breslow"])
    def test_root_is_log_sqrt_two(self, ties):
        fit = fit_cox(small_dataset(), CoxOptions(ties=ties))
        assert fit.converged
        assert fit.coefficient("x") == pytest.approx(math.log(math.sqrt(2.0)),
                                                     abs=1e-6)

    def test_loglik_at_root(self):
        u = math.sqrt(2.0)
        expected = math.log(u) - math.log(2 * u + 2) - math.log(u + 2)
        fit = fit_cox(small_dataset())
        assert fit.loglik == pytest.approx(expected, abs=1e-9)
        assert np.max(np.abs(fit.score)) < 1e-6
        assert fit.n_events == 2 and fit.n_rows == 4


class TestBruteForceOracle:
    @pytest.mark.parametrize("ties", ["efron", "breslow"])
    @pytest.mark.parametrize("seed,kwargs", [
        (1, {}),
        (2, {"tie_grid": 5}),
        (3, {"entry": True}),
        (4, {"strata": 3}),
        (5, {"weights": True, "tie_grid": 4}),
    ])
    def test_fit_maximizes_the_naive_likelihood(self, ties, seed, kwargs):
        ds = random_dataset(seed, n=70, p=1, **kwargs)
        opts = CoxOptions(ties=ties)
        fit = fit_cox(ds, opts)
        assert fit.converged
        beta_hat = fit.coefficients[0]
        # engine loglik must equal the direct sum at the same point...
        assert naive_loglik(ds, fit.coefficients, ties) == pytest.approx(
            fit.loglik, rel=1e-10, abs=1e-10)
        # ...and the direct sum must peak where the engine says it does
        grid_best = grid_maximize(
            lambda b: naive_loglik(ds, np.array([b]), ties), -3.0, 3.0)
        assert beta_hat == pytest.approx(grid_best, abs=2e-4)

    @pytest.mark.parametrize("ties", ["efron", "breslow"])
    def test_multivariate_loglik_agreement_off_optimum(self, ties):
        ds = random_dataset(8, n=60, p=3, tie_grid=4, weights=True, strata=2)
        problem = _CoxProblem(ds, CoxOptions(ties=ties))
        rng = np.random.default_rng(0)
        for _ in range(4):
            beta = rng.normal(scale=0.7, size=3)
            ll, _, _ = problem.eval(beta)
            assert naive_loglik(ds, beta, ties) == pytest.approx(
                ll, rel=1e-10, abs=1e-10)


def _phreg_fit(ds, ties, entry=False, strata=False):
    kw = {"status": ds.event.astype(int), "ties": ties}
    if entry:
        kw["entry"] = ds.start
    if strata:
        kw["strata"] = ds.stratum
    model = statsmodels.PHReg(ds.stop, ds.covariates, **kw)
    return model.fit()


class TestExternalCrossCheck:
    """statsmodels.PHReg fits the same likelihoods (no weights, no robust)."""

    @pytest.mark.parametrize("ties", ["efron", "breslow"])
    def test_plain_right_censored(self, ties):
        ds = random_dataset(11, n=120, p=2, tie_grid=6)
        ours = fit_cox(ds, CoxOptions(ties=ties))
        ref = _phreg_fit(ds, ties)
        np.testing.assert_allclose(ours.coefficients, ref.params, atol=1e-6)
        np.testing.assert_allclose(ours.model_se, ref.bse, atol=1e-6)

    def test_left_truncated(self):
        ds = random_dataset(12, n=120, p=2, entry=True)
        ours = fit_cox(ds)
        ref = _phreg_fit(ds, "efron", entry=True)
        np.testing.assert_allclose(ours.coefficients, ref.params, atol=1e-6)
        np.testing.assert_allclose(ours.model_se, ref.bse, atol=1e-6)

    def test_stratified(self):
        ds = random_dataset(13, n=150, p=2, strata=3, tie_grid=5)
        ours = fit_cox(ds)
        ref = _phreg_fit(ds, "efron", strata=True)
        np.testing.assert_allclose(ours.coefficients, ref.params, atol=1e-6)
        np.testing.assert_allclose(ours.model_se, ref.bse, atol=1e-6)

    def test_loglik_matches_reference(self):
        ds = random_dataset(14, n=100, p=2, tie_grid=4)
        ours = fit_cox(ds)
        ref = _phreg_fit(ds, "efron")
        assert ours.loglik == pytest.approx(
            ref.model.loglike(np.asarray(ref.params)), rel=1e-8)


class TestDerivatives:
    @pytest.mark.parametrize("ties", ["efron", "breslow"])
    def test_score_matches_finite_differences(self, ties):
        ds = random_dataset(21, n=80, p=2, tie_grid=5, weights=True, entry=True)
        problem = _CoxProblem(ds, CoxOptions(ties=ties))
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(3):
            beta = rng.normal(scale=0.5, size=2)
            _, score, info = problem.eval(beta)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                up, _, _ = problem.eval(beta + e)
                dn, _, _ = problem.eval(beta - e)
                fd = (up - dn) / (2 * h)
                assert fd == pytest.approx(score[j], rel=1e-5, abs=1e-7)
            # information = negative Hessian: check one diagonal entry
            e0 = np.array([h, 0.0])
            _, s_up, _ = problem.eval(beta + e0)
            _, s_dn, _ = problem.eval(beta - e0)
            fd_h = (s_up[0] - s_dn[0]) / (2 * h)
            assert -fd_h == pytest.approx(info[0, 0], rel=1e-4)

    def test_score_residuals_sum_to_score(self):
        ds = random_dataset(22, n=90, p=2, tie_grid=4, weights=True, strata=2)
        problem = _CoxProblem(ds, CoxOptions())
        beta = np.array([0.3, -0.4])
        _, score, _ = problem.eval(beta)
        resid = problem.score_residuals(beta)
        np.testing.assert_allclose(ds.weight @ resid, score, atol=1e-8)


class TestInvariances:
    def test_covariate_shift_leaves_coefficients_alone(self):
        ds = random_dataset(31, n=90, p=2, tie_grid=3, weights=True)
        shifted = AnalysisDataset(
            cluster=ds.cluster, start=ds.start, stop=ds.stop, event=ds.event,
            covariates=ds.covariates + np.array([5.0, -11.0]),
            covariate_names=ds.covariate_names, weight=ds.weight,
            stratum=ds.stratum)
        a = fit_cox(ds)
        b = fit_cox(shifted)
        np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-8)
        np.testing.assert_allclose(a.model_se, b.model_se, atol=1e-8)

    def test_covariate_scale_rescales_coefficients(self):
        ds = random_dataset(32, n=90, p=2, tie_grid=3)
        scale = np.array([4.0, 0.25])
        scaled = AnalysisDataset(
            cluster=ds.cluster, start=ds.start, stop=ds.stop, event=ds.event,
            covariates=ds.covariates * scale,
            covariate_names=ds.covariate_names, stratum=ds.stratum)
        a = fit_cox(ds)
        b = fit_cox(scaled)
        np.testing.assert_allclose(a.coefficients, b.coefficients * scale,
                                   atol=1e-8)
        np.testing.assert_allclose(a.model_se, b.model_se * scale, atol=1e-8)

    def test_time_scale_is_irrelevant(self):
        ds = random_dataset(33, n=80, p=2, entry=True)
        warped = AnalysisDataset(
            cluster=ds.cluster, start=ds.start * 7.0, stop=ds.stop * 7.0,
            event=ds.event, covariates=ds.covariates,
            covariate_names=ds.covariate_names, stratum=ds.stratum)
        a = fit_cox(ds)
        b = fit_cox(warped)
        np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-10)

    def test_integer_weights_equal_row_duplication_under_breslow(self):
        ds = random_dataset(34, n=40, p=2, tie_grid=4)
        reps = np.random.default_rng(7).integers(1, 4, size=ds.n_rows)
        weighted = AnalysisDataset(
            cluster=ds.cluster, start=ds.start, stop=ds.stop, event=ds.event,
            covariates=ds.covariates, covariate_names=ds.covariate_names,
            weight=reps.astype(float))
        idx = np.repeat(np.arange(ds.n_rows), reps)
        duplicated = AnalysisDataset(
            cluster=np.arange(len(idx)), start=ds.start[idx], stop=ds.stop[idx],
            event=ds.event[idx], covariates=ds.covariates[idx],
            covariate_names=ds.covariate_names)
        a = fit_cox(weighted, CoxOptions(ties="breslow"))
        b = fit_cox(duplicated, CoxOptions(ties="breslow"))
        np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-8)
        assert a.loglik == pytest.approx(b.loglik, rel=1e-10)


class TestRobustVariance:
    def test_sandwich_matches_direct_computation(self):
        ds = random_dataset(41, n=100, p=2, tie_grid=3, weights=True)
        cluster = np.repeat(np.arange(25), 4)
        ds = AnalysisDataset(
            cluster=cluster, start=ds.start, stop=ds.stop, event=ds.event,
            covariates=ds.covariates, covariate_names=ds.covariate_names,
            weight=ds.weight)
        fit = fit_cox(ds, CoxOptions(robust_cluster=True))
        problem = _CoxProblem(ds, CoxOptions())
        resid = problem.score_residuals(fit.coefficients) * ds.weight[:, None]
        grams = np.zeros((2, 2))
        for g in np.unique(cluster):
            s = resid[cluster == g].sum(axis=0)
            grams += np.outer(s, s)
        bread = np.linalg.inv(fit.information)
        np.testing.assert_allclose(fit.robust_vcov, bread @ grams @ bread,
                                   atol=1e-10)
        np.testing.assert_allclose(
            fit.robust_se, np.sqrt(np.diag(bread @ grams @ bread)), atol=1e-10)

    def test_post_hoc_helper_matches_option(self):
        ds = random_dataset(42, n=80, p=2)
        via_option = fit_cox(ds, CoxOptions(robust_cluster=True))
        fit = fit_cox(ds)
        assert fit.robust_se is None
        with pytest.raises(EstimationError):
            fit.se("x1", robust=True)
        robust_variance(fit, ds)
        np.testing.assert_allclose(fit.robust_se, via_option.robust_se,
                                   atol=1e-12)

    def test_independent_rows_give_score_outer_product(self):
        ds = random_dataset(43, n=60, p=2)
        fit = fit_cox(ds, CoxOptions(robust_cluster=True))
        problem = _CoxProblem(ds, CoxOptions())
        r = problem.score_residuals(fit.coefficients)
        bread = np.linalg.inv(fit.information)
        expected = bread @ (r.T @ r) @ bread
        np.testing.assert_allclose(fit.robust_vcov, expected, atol=1e-10)


class TestFailureModes:
    def test_no_events(self):
        ds = AnalysisDataset(
            cluster=np.arange(3), start=np.zeros(3), stop=np.ones(3),
            event=np.zeros(3, bool), covariates=np.eye(3, 1),
            covariate_names=("x",))
        with pytest.raises(NoEventsError):
            fit_cox(ds)

    def test_constant_covariate(self):
        ds = AnalysisDataset(
            cluster=np.arange(4), start=np.zeros(4),
            stop=np.array([1.0, 2.0, 3.0, 4.0]),
            event=np.array([True, True, True, False]),
            covariates=np.ones((4, 1)), covariate_names=("x",))
        with pytest.raises(ConstantCovariateError, match="x"):
            fit_cox(ds)

    def test_monotone_likelihood_is_detected(self):
        # x separates perfectly: every x=1 event precedes all x=0 exits
        n = 20
        x = np.array([1.0] * 10 + [0.0] * 10)
        stop = np.concatenate([np.arange(1, 11), np.arange(20, 30)]) * 1.0
        event = np.array([True] * 10 + [False] * 10)
        ds = AnalysisDataset(
            cluster=np.arange(n), start=np.zeros(n), stop=stop, event=event,
            covariates=x.reshape(-1, 1), covariate_names=("x",))
        with pytest.raises(MonotoneLikelihoodError):
            fit_cox(ds)

    def test_robust_variance_needs_two_clusters(self):
        ds = random_dataset(44, n=30, p=1)
        ds = AnalysisDataset(
            cluster=np.zeros(ds.n_rows, dtype=int), start=ds.start,
            stop=ds.stop, event=ds.event, covariates=ds.covariates,
            covariate_names=ds.covariate_names)
        with pytest.raises(ClusterError):
            fit_cox(ds, CoxOptions(robust_cluster=True))

    def test_bad_options_rejected(self):
        with pytest.raises(ParameterError):
            CoxOptions(ties="exact")
        with pytest.raises(ParameterError):
            CoxOptions(max_iterations=0)

    def test_unconverged_fit_is_flagged_not_raised(self):
        ds = random_dataset(45, n=100, p=2)
        fit = fit_cox(ds, CoxOptions(max_iterations=1, tolerance=1e-15))
        assert isinstance(fit, FitResult)
        assert not fit.converged
