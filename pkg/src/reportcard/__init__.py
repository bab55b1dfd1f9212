"""Reliability-controlled ordinal grading of noisy unit-level estimates."""

from .deconvolution import SplineMixing, calibrate_penalty, fit_hierarchical, fit_logspline
from .ingest import UnitRecord, load_firms, load_units
from .metrics import conditional_dr_matrix, discordance_rate, expected_tau, frontier_table
from .pipeline import Pipeline, PipelineConfig, run_pipeline
from .posterior import PairwiseMatrices, hierarchical_posteriors, pairwise_matrices, unit_posteriors
from .precision import PrecisionModelParams, fit_gmm, j_test, studentize
from .solver import GradeAssignment, assemble_objective, lambda_sweep, solve

__all__ = [
    "GradeAssignment",
    "PairwiseMatrices",
    "Pipeline",
    "PipelineConfig",
    "PrecisionModelParams",
    "SplineMixing",
    "UnitRecord",
    "assemble_objective",
    "calibrate_penalty",
    "conditional_dr_matrix",
    "discordance_rate",
    "expected_tau",
    "fit_gmm",
    "fit_hierarchical",
    "fit_logspline",
    "frontier_table",
    "hierarchical_posteriors",
    "j_test",
    "lambda_sweep",
    "load_firms",
    "load_units",
    "pairwise_matrices",
    "run_pipeline",
    "solve",
    "studentize",
    "unit_posteriors",
]

__version__ = "0.1.0"
