"""Coarsened and debiased mediation functionals with a discretized mediator."""

from .core import (
    BinningScheme,
    Dataset,
    EstimateResult,
    KernelSpec,
    NuisanceSet,
    Observation,
    assign_bin,
    make_equal_width_binning,
    make_quantile_binning,
)
from .dgp import DgpSpec, oracle_nuisances, population_quantile_binning, sample_dataset, true_gamma, true_psi
from .errors import (
    CoarsekitError,
    ConfigError,
    DomainError,
    FitError,
    IntegrationError,
    NumericalError,
    SmoothingError,
)
from .estimators import EstimationPlan, EstimatorId, bootstrap_ci, estimate
from .nuisance import MisspecConfig, fit_nuisances

__version__ = "0.1.0"

__all__ = [
    "BinningScheme",
    "CoarsekitError",
    "ConfigError",
    "Dataset",
    "DgpSpec",
    "DomainError",
    "EstimateResult",
    "EstimationPlan",
    "EstimatorId",
    "FitError",
    "IntegrationError",
    "KernelSpec",
    "MisspecConfig",
    "NumericalError",
    "NuisanceSet",
    "Observation",
    "SmoothingError",
    "assign_bin",
    "bootstrap_ci",
    "estimate",
    "fit_nuisances",
    "make_equal_width_binning",
    "make_quantile_binning",
    "oracle_nuisances",
    "population_quantile_binning",
    "sample_dataset",
    "true_gamma",
    "true_psi",
]
