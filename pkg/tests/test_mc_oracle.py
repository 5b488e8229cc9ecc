import numpy as np
import pytest

from ecrplus.aggregation import aggregate_loss, quantile, tv_distance
from ecrplus.domain import LatticeSeverity, Policyholder, Portfolio, RiskFactorSpec
from ecrplus.errors import DataError
from ecrplus.mc_oracle import SimConfig, simulate_bernoulli, simulate_poisson_model

from conftest import table1_portfolio


class TestBernoulliModel:
    def test_zero_probability_point_mass(self):
        holder = Policyholder(
            id="z", age_group=0, gender="f", birth_year=0, death_prob=0.0,
            weights=np.array([1.0]), payment=LatticeSeverity.point(1), multiplicity=50,
        )
        dist = simulate_bernoulli(Portfolio(holders=[holder]), [], SimConfig(n_sims=500, seed=1))
        assert dist.pmf[0] == 1.0

    def test_certain_death_fixed_payment(self):
        holder = Policyholder(
            id="c", age_group=0, gender="f", birth_year=0, death_prob=1.0,
            weights=np.array([1.0]), payment=LatticeSeverity.point(5),
        )
        dist = simulate_bernoulli(Portfolio(holders=[holder]), [], SimConfig(n_sims=200, seed=1))
        assert dist.pmf[5] == 1.0

    def test_reference_quantiles(self):
        cfg = SimConfig(n_sims=50_000, seed=3, method="grouped")
        dist = simulate_bernoulli(table1_portfolio(True), [], cfg)
        got = [quantile(dist, p) for p in (0.01, 0.10, 0.50, 0.90, 0.99)]
        for g, ref in zip(got, (450, 472, 500, 528, 552)):
            assert abs(g - ref) <= 3

    def test_reproducible(self):
        rf = [RiskFactorSpec(k=1, variance=0.1)]
        cfg = SimConfig(n_sims=4000, seed=11)
        a = simulate_bernoulli(table1_portfolio(False), rf, cfg)
        b = simulate_bernoulli(table1_portfolio(False), rf, cfg)
        assert np.array_equal(a.pmf, b.pmf)

    def test_methods_agree_in_distribution(self):
        rf = [RiskFactorSpec(k=1, variance=0.1)]
        grouped = simulate_bernoulli(
            table1_portfolio(False), rf, SimConfig(n_sims=20_000, seed=5, method="grouped")
        )
        individual = simulate_bernoulli(
            table1_portfolio(False), rf, SimConfig(n_sims=5_000, seed=6, method="individual")
        )
        # identical laws, so means agree up to Monte Carlo error
        se = np.sqrt(25_500.0) * np.sqrt(1 / 20_000 + 1 / 5_000)
        assert abs(grouped.mean() - individual.mean()) < 5 * se

    def test_untruncated_factor_error_names_cell(self):
        holder = Policyholder(
            id="fragile", age_group=0, gender="f", birth_year=0, death_prob=0.5,
            weights=np.array([0.0, 1.0]), payment=LatticeSeverity.point(1), multiplicity=10,
        )
        rf = [RiskFactorSpec(k=1, variance=1.5)]
        cfg = SimConfig(n_sims=5000, seed=2, truncate_factors=False)
        with pytest.raises(DataError, match="fragile"):
            simulate_bernoulli(Portfolio(holders=[holder]), rf, cfg)

    def test_truncation_keeps_probabilities_valid(self):
        holder = Policyholder(
            id="t", age_group=0, gender="f", birth_year=0, death_prob=0.5,
            weights=np.array([0.2, 0.8]), payment=LatticeSeverity.point(1), multiplicity=20,
        )
        rf = [RiskFactorSpec(k=1, variance=1.5)]
        dist = simulate_bernoulli(Portfolio(holders=[holder]), rf, SimConfig(n_sims=3000, seed=2))
        assert dist.pmf.sum() == pytest.approx(1.0, abs=1e-12)
        assert dist.n_max <= 20


class TestPoissonModel:
    def test_mean_matches_intensity(self):
        cfg = SimConfig(n_sims=200_000, seed=7)
        dist = simulate_poisson_model(table1_portfolio(True), [], cfg)
        se = np.sqrt(500.0 / 200_000)
        assert abs(dist.mean() - 500.0) < 3 * se

    def test_mixed_sector_variance(self):
        rf = [RiskFactorSpec(k=1, variance=0.1)]
        cfg = SimConfig(n_sims=200_000, seed=8)
        dist = simulate_poisson_model(table1_portfolio(False), rf, cfg)
        assert dist.variance() == pytest.approx(25_500.0, rel=0.05)

    def test_degenerate_portfolio(self):
        holder = Policyholder(
            id="d", age_group=0, gender="f", birth_year=0, death_prob=0.0,
            weights=np.array([1.0]), payment=LatticeSeverity.point(1),
        )
        dist = simulate_poisson_model(Portfolio(holders=[holder]), [], SimConfig(n_sims=100, seed=1))
        assert dist.pmf[0] == 1.0

    def test_random_severity_draws(self):
        sev = LatticeSeverity(unit=1.0, pmf={1: 0.5, 3: 0.5})
        holder = Policyholder(
            id="s", age_group=0, gender="f", birth_year=0, death_prob=0.1,
            weights=np.array([1.0]), payment=sev, multiplicity=100,
        )
        dist = simulate_poisson_model(Portfolio(holders=[holder]), [], SimConfig(n_sims=100_000, seed=3))
        assert dist.mean() == pytest.approx(10 * 2.0, rel=0.02)

    def test_convergence_to_engine(self):
        exact = aggregate_loss(table1_portfolio(True), [], unit=1.0)
        tvs = []
        for n_sims, seed in ((2_000, 1), (20_000, 1), (200_000, 1)):
            emp = simulate_poisson_model(table1_portfolio(True), [], SimConfig(n_sims=n_sims, seed=seed))
            tvs.append(tv_distance(emp.truncated(exact.n_max), exact))
        assert tvs[0] > tvs[1] > tvs[2]
