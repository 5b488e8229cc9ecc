import numpy as np
import pytest

from ecrplus.domain import CohortPanel
from ecrplus.errors import DataError, DegenerateEstimateError
from ecrplus.estimation import (
    BlockPrior,
    ParamVector,
    PriorSpec,
    log_likelihood,
    log_likelihood_bernoulli,
    log_prior,
    map_risk_factor,
    map_risk_factor_approx,
    map_sigma,
    map_sigma_approx,
    mom_fit,
    mom_transform,
    prior_covariance,
    _sigma_eq_lhs,
)
from ecrplus.trends import TrendParams, cause_weights_grid, death_prob_grid, laplace_cdf_inv

from conftest import flat_trends, realistic_trends, simulate_panel


def _single_cause_params(q, w1=1.0, sigma2=1.0, A=1):
    """K=1 parameters with the second gender column's intensity suppressed."""
    alpha = np.full((A, 2), laplace_cdf_inv(q))
    alpha[:, 1] = -745.0
    u = np.zeros((A, 2, 2))
    u[:, :, 0] = -745.0  # all weight on cause 1
    tr = TrendParams(
        alpha=alpha, beta=np.zeros((A, 2)), zeta=0.0, eta=1.0 / 150.0,
        u=u, v=np.zeros_like(u), phi=np.zeros(2), psi=np.full(2, 1.0 / 150.0), t0=2000.0,
    )
    return ParamVector(trends=tr, sigma2=np.array([sigma2]))


class TestLogLikelihood:
    def test_empty_counts_reduce_to_intensity_sum(self):
        tr = flat_trends(A=2, K=0, alpha=-1.0)
        pv = ParamVector(trends=tr, sigma2=np.zeros(0))
        exposure = np.full((3, 2, 2), 100)
        panel = CohortPanel(
            years=[2000, 2001, 2002],
            deaths=np.zeros((3, 2, 2, 1), dtype=int),
            exposure=exposure,
        )
        rho = exposure * death_prob_grid(panel.years, tr)
        assert log_likelihood(panel, pv) == pytest.approx(-rho.sum(), rel=1e-12)

    def test_hand_evaluated_mixed_term(self):
        # One active cell with rho = 1, one death, sigma^2 = 1:
        # log[Gamma(2) / (Gamma(1) * 1 * 2^2)] = -log 4.
        pv = _single_cause_params(q=0.5)
        deaths = np.zeros((1, 1, 2, 2), dtype=int)
        deaths[0, 0, 0, 1] = 1
        panel = CohortPanel(years=[2000], deaths=deaths, exposure=np.array([[[2, 1]]]))
        assert log_likelihood(panel, pv) == pytest.approx(-np.log(4.0), abs=1e-12)

    def test_truth_beats_perturbations(self, rng):
        tr = realistic_trends(rng, A=3, K=2)
        sigma2 = np.array([0.05, 0.1])
        pv = ParamVector(trends=tr, sigma2=sigma2)
        panel, _ = simulate_panel(rng, tr, sigma2, np.arange(1987, 2007), 50_000)
        ll_true = log_likelihood(panel, pv)
        wins = 0
        for _ in range(100):
            delta = rng.normal(0, 0.02, tr.alpha.shape)
            pv_alt = ParamVector(
                trends=TrendParams(
                    alpha=tr.alpha + delta, beta=tr.beta, zeta=tr.zeta, eta=tr.eta,
                    u=tr.u, v=tr.v, phi=tr.phi, psi=tr.psi, t0=tr.t0,
                    age_lower_bounds=tr.age_lower_bounds,
                ),
                sigma2=sigma2,
            )
            wins += ll_true >= log_likelihood(panel, pv_alt)
        assert wins > 60

    def test_impossible_counts_give_minus_inf(self):
        # The suppressed gender's idiosyncratic intensity underflows to an
        # exact zero, so any death there is impossible under the model.
        pv = _single_cause_params(q=0.5)
        deaths = np.zeros((1, 1, 2, 2), dtype=int)
        deaths[0, 0, 1, 0] = 5
        with pytest.warns(UserWarning):
            panel = CohortPanel(years=[2000], deaths=deaths, exposure=np.array([[[2, 1]]]))
        assert log_likelihood(panel, pv) == -np.inf


class TestBernoulliLikelihood:
    def test_hand_value(self):
        tr = flat_trends(A=1, K=0, alpha=0.0)  # q = 0.5
        pv = ParamVector(trends=tr, sigma2=np.zeros(0))
        deaths = np.ones((1, 1, 2, 1), dtype=int)
        panel = CohortPanel(years=[2000], deaths=deaths, exposure=np.full((1, 1, 2), 2))
        # each gender cell: log C(2,1) + log 0.25 = log 0.5
        assert log_likelihood_bernoulli(panel, pv) == pytest.approx(2 * np.log(0.5), abs=1e-12)

    def test_no_deaths(self):
        tr = flat_trends(A=1, K=0, alpha=-1.3)
        pv = ParamVector(trends=tr, sigma2=np.zeros(0))
        panel = CohortPanel(
            years=[2000], deaths=np.zeros((1, 1, 2, 1), dtype=int),
            exposure=np.full((1, 1, 2), 40),
        )
        q = death_prob_grid(panel.years, tr)
        assert log_likelihood_bernoulli(panel, pv) == pytest.approx(
            float((40 * np.log1p(-q)).sum()), rel=1e-12
        )

    def test_certain_death_limit(self):
        tr = flat_trends(A=1, K=0, alpha=36.0)  # q ~ 1 - 1e-16
        pv = ParamVector(trends=tr, sigma2=np.zeros(0))
        deaths = np.full((1, 1, 2, 1), 3)
        panel = CohortPanel(years=[2000], deaths=deaths, exposure=np.full((1, 1, 2), 3))
        ll = log_likelihood_bernoulli(panel, pv)
        assert -1e-9 < ll <= 0.0

    def test_deaths_exceeding_exposure_rejected(self):
        tr = flat_trends(A=1, K=0)
        pv = ParamVector(trends=tr, sigma2=np.zeros(0))
        deaths = np.full((1, 1, 2, 1), 5)
        with pytest.warns(UserWarning):
            panel = CohortPanel(years=[2000], deaths=deaths, exposure=np.full((1, 1, 2), 2))
        with pytest.raises(DataError):
            log_likelihood_bernoulli(panel, pv)

    def test_requires_single_cause(self, rng):
        tr = realistic_trends(rng, A=2, K=1)
        pv = ParamVector(trends=tr, sigma2=np.array([0.1]))
        panel, _ = simulate_panel(rng, tr, [0.1], np.arange(2000, 2003), 1000)
        with pytest.raises(DataError):
            log_likelihood_bernoulli(panel, pv)


class TestLogPrior:
    def test_zero_parameters_attain_log_d(self):
        tr = flat_trends(A=6, K=0, alpha=0.0, beta=0.0)
        pv = ParamVector(trends=tr, sigma2=np.zeros(0))
        bp = BlockPrior(c=2.0, epsilon=0.1, order=1)
        prior = PriorSpec({"alpha": bp})
        p = 2.0 * ( np.diff(np.eye(6), axis=0).T @ np.diff(np.eye(6), axis=0) + 0.1 * np.eye(6))
        log_d = 0.5 * (np.linalg.slogdet(p)[1] - 6 * np.log(np.pi))
        assert log_prior(pv, prior) == pytest.approx(2 * log_d, rel=1e-12)

    def test_constant_profile_first_differences_vanish(self):
        tr = flat_trends(A=5, K=0, alpha=0.73)
        pv = ParamVector(trends=tr, sigma2=np.zeros(0))
        prior = PriorSpec({"alpha": BlockPrior(c=10.0, epsilon=0.0, order=1)})
        assert log_prior(pv, prior) == 0.0  # improper prior: log d := 0

    def test_linear_profile_second_differences_vanish(self):
        tr = flat_trends(A=5, K=0)
        alpha = np.linspace(-2.0, -1.0, 5)[:, None].repeat(2, axis=1)
        tr = TrendParams(
            alpha=alpha, beta=tr.beta, zeta=tr.zeta, eta=tr.eta, u=tr.u, v=tr.v,
            phi=tr.phi, psi=tr.psi, t0=tr.t0,
        )
        pv = ParamVector(trends=tr, sigma2=np.zeros(0))
        prior = PriorSpec({"alpha": BlockPrior(c=10.0, epsilon=0.0, order=2)})
        assert log_prior(pv, prior) == pytest.approx(0.0, abs=1e-18)

    def test_correlation_positive_and_decreasing(self):
        cov = prior_covariance(10, BlockPrior(c=1.0, epsilon=0.01, order=1))
        sd = np.sqrt(np.diag(cov))
        corr = cov / np.outer(sd, sd)
        assert np.all(corr > 0.0)
        first_row = corr[0]
        assert np.all(np.diff(first_row) < 0.0)


class TestMapEquations:
    def test_factor_mode_closed_form(self):
        # sum n = 10, sum rho = 10, sigma^2 = 1 -> 10/11
        pv = _single_cause_params(q=0.05, sigma2=1.0)
        deaths = np.zeros((1, 1, 2, 2), dtype=int)
        deaths[0, 0, 0, 1] = 10
        panel = CohortPanel(years=[2000], deaths=deaths, exposure=np.array([[[200, 1]]]))
        lam = map_risk_factor(panel, pv, 1, 2000)
        assert lam == pytest.approx(10.0 / 11.0, rel=1e-9)

    def test_factor_mode_no_deaths(self):
        pv = _single_cause_params(q=0.05, sigma2=0.5)
        deaths = np.zeros((1, 1, 2, 2), dtype=int)
        panel = CohortPanel(years=[2000], deaths=deaths, exposure=np.array([[[200, 1]]]))
        lam = map_risk_factor(panel, pv, 1, 2000)
        assert lam == pytest.approx((2.0 - 1.0) / (2.0 + 10.0), rel=1e-9)

    def test_factor_mode_degenerate(self):
        pv = _single_cause_params(q=0.05, sigma2=2.0)  # 1/sigma^2 - 1 < 0
        deaths = np.zeros((1, 1, 2, 2), dtype=int)
        panel = CohortPanel(years=[2000], deaths=deaths, exposure=np.array([[[200, 1]]]))
        with pytest.raises(DegenerateEstimateError):
            map_risk_factor(panel, pv, 1, 2000)

    def test_factor_mode_is_stationary_point(self, rng):
        # The closed form must zero the derivative of the conditional
        # log-posterior in lambda.
        for _ in range(30):
            sigma2 = rng.uniform(0.05, 1.0)
            n_sum = rng.poisson(50)
            rho = rng.uniform(20.0, 120.0)
            inv = 1.0 / sigma2
            if inv - 1.0 + n_sum <= 0:
                continue
            lam = (inv - 1.0 + n_sum) / (inv + rho)

            def logpost(x):
                return -rho * x + n_sum * np.log(x) + (inv - 1.0) * np.log(x) - x * inv

            h = 1e-5 * lam
            deriv = (logpost(lam + h) - logpost(lam - h)) / (2 * h)
            assert abs(deriv) < 1e-6

    def test_sigma_root_and_residual(self):
        lam = np.array([0.5, 1.5])
        s = map_sigma(lam)
        rhs = np.mean(1.0 + np.log(lam) - lam)
        assert abs(_sigma_eq_lhs(s) - rhs) < 1e-9

    def test_sigma_equation_monotone_with_unique_root(self):
        lam = np.array([0.7, 1.1, 1.4, 0.9])
        rhs = np.mean(1.0 + np.log(lam) - lam)
        grid = np.logspace(-3, 1, 300)
        vals = np.array([_sigma_eq_lhs(s) for s in grid])
        assert np.all(np.diff(vals) < 0.0)
        signs = np.sign(vals - rhs)
        assert np.count_nonzero(np.diff(signs)) == 1

    def test_sigma_jensen_negativity(self, rng):
        for _ in range(20):
            lam = rng.gamma(5, 0.2, size=10)
            if np.allclose(lam, 1.0):
                continue
            assert np.mean(1.0 + np.log(lam) - lam) < 0.0

    def test_sigma_degenerate_series(self):
        with pytest.raises(DegenerateEstimateError):
            map_sigma(np.ones(8))

    def test_approximations(self):
        pv = _single_cause_params(q=0.05, sigma2=1.0)
        deaths = np.zeros((1, 1, 2, 2), dtype=int)
        deaths[0, 0, 0, 1] = 10
        panel = CohortPanel(years=[2000], deaths=deaths, exposure=np.array([[[200, 1]]]))
        assert map_risk_factor_approx(panel, pv, 1, 2000) == pytest.approx(0.9, rel=1e-9)
        assert map_sigma_approx(np.ones(5)) == 0.0
        assert map_sigma_approx([0.5, 1.5]) == pytest.approx(0.5, rel=1e-12)

    def test_approximation_boundary_flagged(self):
        pv = _single_cause_params(q=0.05, sigma2=1.0)
        deaths = np.zeros((1, 1, 2, 2), dtype=int)
        deaths[0, 0, 0, 1] = 1
        panel = CohortPanel(years=[2000], deaths=deaths, exposure=np.array([[[200, 1]]]))
        with pytest.warns(UserWarning):
            lam = map_risk_factor_approx(panel, pv, 1, 2000)
        assert lam == 0.0


class TestMomTransform:
    def test_stationary_model_is_identity(self):
        tr = flat_trends(A=2, K=1, alpha=-1.5)
        pv = ParamVector(trends=tr, sigma2=np.array([0.1]))
        deaths = np.random.default_rng(0).poisson(5, size=(4, 2, 2, 2))
        panel = CohortPanel(years=[2000, 2001, 2002, 2003], deaths=deaths,
                            exposure=np.full((4, 2, 2), 1000))
        out = mom_transform(panel, pv)
        np.testing.assert_array_equal(out.deaths, panel.deaths)

    def test_population_doubling(self):
        tr = flat_trends(A=1, K=0, alpha=-1.5)
        pv = ParamVector(trends=tr, sigma2=np.zeros(0))
        exposure = np.array([[[500, 500]], [[1000, 1000]]])
        deaths = np.full((2, 1, 2, 1), 7)
        panel = CohortPanel(years=[2000, 2001], deaths=deaths, exposure=exposure)
        out = mom_transform(panel, pv)
        np.testing.assert_array_equal(out.deaths[0], 14)
        np.testing.assert_array_equal(out.deaths[1], 7)

    def test_zero_counts_stay_zero(self):
        tr = flat_trends(A=1, K=0, alpha=-1.5)
        pv = ParamVector(trends=tr, sigma2=np.zeros(0))
        panel = CohortPanel(years=[2000, 2001], deaths=np.zeros((2, 1, 2, 1), dtype=int),
                            exposure=np.full((2, 1, 2), 100))
        out = mom_transform(panel, pv)
        assert out.deaths.sum() == 0


class TestMomFit:
    def test_noiseless_recovery(self):
        # Deterministic counts equal to their expectation with beta = v = 0:
        # the regressions recover alpha exactly and the weights exactly.
        A, K, T = 2, 1, 6
        alpha_true = laplace_cdf_inv(0.05)
        tr = flat_trends(A=A, K=K, alpha=alpha_true)
        years = np.arange(2000, 2000 + T)
        exposure = np.full((T, A, 2), 10_000)
        q = death_prob_grid(years, tr)
        w = cause_weights_grid(years, tr)
        rho = exposure[:, :, :, None] * q[:, :, :, None] * w
        panel = CohortPanel(years=years, deaths=np.rint(rho).astype(int), exposure=exposure)
        fit = mom_fit(panel, tr)
        np.testing.assert_allclose(fit.trends.alpha, alpha_true, atol=1e-9)
        w_fit = cause_weights_grid(years, fit.trends)
        np.testing.assert_allclose(w_fit, w, atol=1e-9)

    def test_variance_identity_on_average(self, rng):
        # E[sample variance of the rescaled ratios] = w/(mq) + sigma^2 w^2;
        # averaging the plug-in estimator over replications recovers sigma^2.
        A, K, T = 2, 1, 30
        tr = flat_trends(A=A, K=K, alpha=-2.0)
        sigma2 = np.array([0.1])
        years = np.arange(1980, 1980 + T)
        pv = ParamVector(trends=tr, sigma2=sigma2)
        estimates = []
        for _ in range(200):
            panel, _ = simulate_panel(rng, tr, sigma2, years, 100_000)
            transformed = mom_transform(panel, pv)
            q_T = death_prob_grid(years[-1:], tr)[0]
            w_T = cause_weights_grid(years[-1:], tr)[0]
            m_T = panel.exposure[-1].astype(float)
            w_star = transformed.deaths / (m_T * q_T)[None, :, :, None]
            var_hat = w_star.var(axis=0, ddof=1)
            num = float((var_hat[:, :, 1] - w_T[:, :, 1] / (m_T * q_T)).sum())
            den = float((w_T[:, :, 1] ** 2).sum())
            estimates.append(max(0.0, num / den))
        assert np.mean(estimates) == pytest.approx(0.1, rel=0.10)

    def test_zero_death_cause_floors_sigma(self):
        A, K, T = 1, 1, 5
        tr = flat_trends(A=A, K=K, alpha=-2.0)
        years = np.arange(2000, 2000 + T)
        exposure = np.full((T, A, 2), 5000)
        deaths = np.zeros((T, A, 2, K + 1), dtype=int)
        deaths[:, :, :, 0] = 60  # all deaths idiosyncratic
        panel = CohortPanel(years=years, deaths=deaths, exposure=exposure)
        fit = mom_fit(panel, tr)
        assert fit.sigma2[0] <= 1e-10

    def test_recovery_from_simulated_panel(self, rng):
        tr = realistic_trends(rng, A=4, K=2)
        sigma2 = np.array([0.05, 0.15])
        panel, _ = simulate_panel(rng, tr, sigma2, np.arange(1987, 2012), 100_000)
        fit = mom_fit(panel, tr)
        q_true = death_prob_grid(panel.years, tr)
        q_fit = death_prob_grid(panel.years, fit.trends)
        assert np.abs(q_fit / q_true - 1).mean() < 0.08

    def test_needs_two_years(self):
        tr = flat_trends(A=1, K=0)
        panel = CohortPanel(years=[2000], deaths=np.zeros((1, 1, 2, 1), dtype=int),
                            exposure=np.full((1, 1, 2), 100))
        with pytest.raises(DataError):
            mom_fit(panel, tr)
