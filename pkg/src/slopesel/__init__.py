"""Penalized least-squares model selection on partition models.

Library layout:

- ``models``: partitions of [0, 1], local orthonormal bases, fitting,
  projection, structural diagnostics.
- ``risk``: empirical and true risk functionals and the excess-risk
  decomposition.
- ``selection``: penalized criterion minimization, multiplier paths,
  dimension-jump detection, slope-heuristics calibration.
- ``simulate``: synthetic data generation and the replicated Monte Carlo
  experiments.
- ``cli``: command-line entry point (``slopesel``).
"""

from .models import (
    AssumptionReport,
    FittedFunction,
    LocalBasis,
    ModelCollection,
    ModelQuadrature,
    PartitionModel,
    SingularGramError,
    build_regular_collection,
    check_assumptions,
    fit_least_squares,
    project_L2,
    zero_function,
)
from .risk import (
    RiskBreakdown,
    Sample,
    contrast,
    diagnostics,
    empirical_risk,
    risk_breakdown,
    sup_deviation,
    true_excess_risk,
)
from .selection import (
    CalibrationResult,
    NoJumpError,
    PenaltyShape,
    SelectionPath,
    calibrate,
    compute_path,
    default_grid,
    detect_jump,
    linear_dimension_shape,
    select,
    write_path_csv,
)
from .simulate import (
    ExperimentReport,
    RegressionSpec,
    ReplicateBatch,
    estimate_min_penalty,
    find_oracle,
    generate_sample,
    run_calibration_experiment,
    run_min_penalty_experiment,
    run_theorem1_experiment,
    run_theorem2_experiment,
    simulate_batch,
)

__version__ = "0.1.0"

__all__ = [
    "AssumptionReport",
    "CalibrationResult",
    "ExperimentReport",
    "FittedFunction",
    "LocalBasis",
    "ModelCollection",
    "ModelQuadrature",
    "NoJumpError",
    "PartitionModel",
    "PenaltyShape",
    "RegressionSpec",
    "ReplicateBatch",
    "RiskBreakdown",
    "Sample",
    "SelectionPath",
    "SingularGramError",
    "build_regular_collection",
    "calibrate",
    "check_assumptions",
    "compute_path",
    "contrast",
    "default_grid",
    "detect_jump",
    "diagnostics",
    "empirical_risk",
    "estimate_min_penalty",
    "find_oracle",
    "fit_least_squares",
    "generate_sample",
    "linear_dimension_shape",
    "project_L2",
    "risk_breakdown",
    "run_calibration_experiment",
    "run_min_penalty_experiment",
    "run_theorem1_experiment",
    "run_theorem2_experiment",
    "select",
    "simulate_batch",
    "sup_deviation",
    "true_excess_risk",
    "write_path_csv",
    "zero_function",
]
