"""Multiple-inflated negative binomial regression with penalized selection
of inflated count values and covariates."""

__version__ = "0.1.0"

from .countdist import log_sum_exp, nb_log_pmf, poisson_log_pmf
from .em import EmOptions, FitResult, e_step, fit, initialize
from .model import (
    CandidateSet,
    Dataset,
    ModelParams,
    PenaltyConfig,
    log_likelihood,
    mixture_log_pmf,
    penalized_objective,
)
from .simulate import (
    GridSpec,
    MetricsRow,
    Scenario,
    builtin_scenario,
    evaluate,
    generate,
    run_replicates,
    table1_demo,
)
from .tuning import TunedFit, TuningGrid, bic, default_grid, tune

__all__ = [
    "CandidateSet",
    "Dataset",
    "EmOptions",
    "FitResult",
    "GridSpec",
    "MetricsRow",
    "ModelParams",
    "PenaltyConfig",
    "Scenario",
    "TunedFit",
    "TuningGrid",
    "bic",
    "builtin_scenario",
    "default_grid",
    "e_step",
    "evaluate",
    "fit",
    "generate",
    "initialize",
    "log_likelihood",
    "log_sum_exp",
    "mixture_log_pmf",
    "nb_log_pmf",
    "penalized_objective",
    "poisson_log_pmf",
    "run_replicates",
    "table1_demo",
    "tune",
]
