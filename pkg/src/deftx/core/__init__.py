"""
Core Module

Models, provenance helpers and error types shared by every deftx module.
"""

from .models import (
    TensorClass,
    Objective,
    SelectionMetric,
    OptimizerKind,
    L1Anchor,
    VectorKind,
    Method,
    AblationVariant,
    VarianceMeasure,
    ModelSpec,
    TrainConfig,
    RankPolicy,
    DenoiseConfig,
    VectorMetadata,
    TrainRecord,
    RunManifest,
)
from .provenance import (
    create_run_id,
    digest_bytes,
    digest_json,
    digest_model,
    digest_arrays,
    digest_file,
    stable_int,
)
from .errors import (
    DeftError,
    UsageError,
    MissingInputError,
    FormatError,
    TrainingFailure,
    ConfigError,
    BudgetError,
    IncompatibleError,
    DimensionalityError,
    NumericInputError,
    EmptyObjectiveError,
    EvaluationError,
    UndefinedOverlapError,
    DeftWarning,
)

__all__ = [
    # Models
    "TensorClass",
    "Objective",
    "SelectionMetric",
    "OptimizerKind",
    "L1Anchor",
    "VectorKind",
    "Method",
    "AblationVariant",
    "VarianceMeasure",
    "ModelSpec",
    "TrainConfig",
    "RankPolicy",
    "DenoiseConfig",
    "VectorMetadata",
    "TrainRecord",
    "RunManifest",
    # Provenance
    "create_run_id",
    "digest_bytes",
    "digest_json",
    "digest_model",
    "digest_arrays",
    "digest_file",
    "stable_int",
    # Errors
    "DeftError",
    "UsageError",
    "MissingInputError",
    "FormatError",
    "TrainingFailure",
    "ConfigError",
    "BudgetError",
    "IncompatibleError",
    "DimensionalityError",
    "NumericInputError",
    "EmptyObjectiveError",
    "EvaluationError",
    "UndefinedOverlapError",
    "DeftWarning",
]
