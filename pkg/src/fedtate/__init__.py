"""Federated doubly robust estimation of a target-site average treatment effect."""

__version__ = "0.1.0"

from .domain import (OutcomeKind, SeedSpec, SiteDataset, SiteRole, TreatmentArm, covariate_means,
                     derive_seed, load_sites_csv, validate_dataset)
from .ensemble import (GlobalEstimate, QSummaries, WeightSolution, build_summaries,
                       build_summaries_raw, combine, global_tate, global_variance, solve_weights)
from .estimators import (ArmEstimate, compute_source_if, compute_target_if, source_augmented,
                         target_aipw, tate)
from .federation import (ProcessingResult, SourceReply, TargetBroadcast, aggregate, deserialize,
                         run_protocol, run_source_round, run_target_round, serialize)
from .nuisance import fit_linear, fit_logistic, fit_outcomes, fit_propensity, predict_propensity
from .pipeline import pooled_estimate
from .tilt import TargetMoments, TiltFit, density_ratio_weights, moment_residual, solve_tilt

__all__ = [
    "OutcomeKind", "SeedSpec", "SiteDataset", "SiteRole", "TreatmentArm", "covariate_means",
    "derive_seed", "load_sites_csv", "validate_dataset",
    "GlobalEstimate", "QSummaries", "WeightSolution", "build_summaries", "build_summaries_raw",
    "combine", "global_tate", "global_variance", "solve_weights",
    "ArmEstimate", "compute_source_if", "compute_target_if", "source_augmented", "target_aipw",
    "tate",
    "ProcessingResult", "SourceReply", "TargetBroadcast", "aggregate", "deserialize",
    "run_protocol", "run_source_round", "run_target_round", "serialize",
    "fit_linear", "fit_logistic", "fit_outcomes", "fit_propensity", "predict_propensity",
    "pooled_estimate",
    "TargetMoments", "TiltFit", "density_ratio_weights", "moment_residual", "solve_tilt",
]
