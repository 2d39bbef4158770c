"""Mortality deceleration detection with penalized gamma-Gompertz fits."""
from .model import (
    DomainError,
    LifeTable,
    ModelParams,
    PenaltyConfig,
    gg_hazard,
    gg_survival,
    gompertz_hazard,
    gradient,
    log_likelihood,
    mse,
    penalized_log_likelihood,
    penalty,
)
from .optimize import (
    DEConfig,
    FitError,
    FitResult,
    SearchBox,
    SEUnavailable,
    differential_evolution,
    fit_map,
    fit_ml,
    hessian_se,
    nelder_mead,
    profile_curve,
)
from .simulate import (
    SimulationScenario,
    SimulationSummary,
    build_life_table,
    error_rates,
    run_scenario,
    sample_lifetimes,
)
from .hmd import (
    HMDDataset,
    extract_cohort_table,
    extract_period_table,
    parse_hmd_file,
)

__version__ = "0.1.0"
