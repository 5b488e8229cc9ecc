"""Extended CreditRisk+ engine for annuity and life insurance portfolios.

Exact one-period loss distributions via Panjer recursion over independent
gamma-mixed cause sectors, with parameter estimation (matching of moments,
posterior modes, MCMC), mortality trend forecasting, scenario analysis,
Solvency II capital and statistical model validation.
"""

from .aggregation import (
    LossDistribution,
    NegBinCount,
    PoissonCount,
    SectorCompound,
    aggregate_loss,
    build_sectors,
    convolve_sectors,
    loss_from_annuity,
    model_moments,
    panjer_compound,
    quantile,
    stochastic_round,
    tv_distance,
)
from .domain import (
    CellSpec,
    CohortPanel,
    LatticeSeverity,
    Policyholder,
    Portfolio,
    RiskFactorSpec,
    build_portfolio,
    pairwise_death_covariance,
)
from .errors import DataError, DegenerateEstimateError, EcrplusError, NumericalError
from .estimation import (
    BlockPrior,
    McmcChain,
    McmcConfig,
    ParamVector,
    PriorSpec,
    information_criteria,
    log_likelihood,
    log_likelihood_bernoulli,
    log_prior,
    map_risk_factor,
    map_risk_factor_approx,
    map_sigma,
    map_sigma_approx,
    mcmc_sample,
    mom_fit,
    mom_transform,
)
from .forecast import (
    ForecastConfig,
    beta_mixing_variance,
    forecast_bands,
    forecast_death_rate,
    life_expectancy,
)
from .mc_oracle import SimConfig, simulate_bernoulli, simulate_poisson_model
from .solvency import (
    DiscountCurve,
    Scenario,
    TermPolicy,
    delta_bof_distribution,
    gamma_mixture_grid,
    scenario_loss,
    scr,
    term_life_bel,
)
from .trends import (
    TrendParams,
    cause_weights,
    death_prob,
    laplace_cdf,
    laplace_cdf_inv,
    trend_time,
)
from .validation import (
    TestReport,
    breusch_godfrey,
    cross_correlation_ttest,
    ks_gamma_test,
    moment_bounds_test,
    standardized_residuals,
)

__version__ = "0.1.0"
