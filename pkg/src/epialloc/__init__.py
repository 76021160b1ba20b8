"""Epidemic parameter inference, scenario reduction, and vaccine allocation."""

from .allocation import (
    BudgetConfig,
    EvaluationResult,
    GaConfig,
    ObjectiveSpec,
    ScenarioBatchEvaluator,
    constraint_violation,
    evaluate_policy,
    ga_optimize,
    solve_nominal,
    solve_stochastic,
)
from .errors import (
    ConfigError,
    DomainError,
    EpiallocError,
    EvaluationError,
    FeasibilityError,
    IntegrationError,
    MissingArtifactError,
    NumericalError,
    OptimizationError,
    StructuralError,
)
from .gp import DensityWorkspace, GpHyperParams, fit_gp_hyperparams
from .mcmc import ChainConfig, PosteriorChain, mh_sample
from .models import (
    ModelSpec,
    PopulationConfig,
    TimeSeriesData,
    Trajectory,
    VaccinePolicy,
    default_initial_state,
    generate_noisy_observations,
    model_spec,
    simulate,
    simulate_batch,
)
from .nlls import NllsFit, nlls_fit
from .scenarios import (
    DiscreteDistribution,
    ScenarioSet,
    augment_onset,
    distribution_mode,
    reduce_scenarios,
    wasserstein_distance,
)

__version__ = "0.1.0"

__all__ = [
    "BudgetConfig",
    "ChainConfig",
    "ConfigError",
    "DensityWorkspace",
    "DiscreteDistribution",
    "DomainError",
    "EpiallocError",
    "EvaluationError",
    "EvaluationResult",
    "FeasibilityError",
    "GaConfig",
    "GpHyperParams",
    "IntegrationError",
    "MissingArtifactError",
    "ModelSpec",
    "NllsFit",
    "NumericalError",
    "ObjectiveSpec",
    "OptimizationError",
    "PopulationConfig",
    "PosteriorChain",
    "ScenarioBatchEvaluator",
    "ScenarioSet",
    "StructuralError",
    "TimeSeriesData",
    "Trajectory",
    "VaccinePolicy",
    "augment_onset",
    "constraint_violation",
    "default_initial_state",
    "distribution_mode",
    "evaluate_policy",
    "fit_gp_hyperparams",
    "ga_optimize",
    "generate_noisy_observations",
    "mh_sample",
    "model_spec",
    "nlls_fit",
    "reduce_scenarios",
    "simulate",
    "simulate_batch",
    "solve_nominal",
    "solve_stochastic",
    "wasserstein_distance",
]
