"""
Core - Errors

Exception hierarchy shared by every module. Each class carries the process
exit code the CLI reports for it.
"""

from typing import Optional


class DeftError(Exception):
    """Base class for all deftx errors"""
    exit_code: int = 1


class UsageError(DeftError):
    """Conflicting or malformed command-line usage"""
    exit_code = 2


class MissingInputError(DeftError):
    """A referenced input file or section does not exist"""
    exit_code = 3


class FormatError(DeftError):
    """Corrupt or invalid file contents"""
    exit_code = 4

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f" at byte {offset}" if offset is not None else ""
        source = f" ({path})" if path else ""
        super().__init__(f"{message}{where}{source}")


class TrainingFailure(DeftError):
    """Training diverged (non-finite loss or gradient)"""
    exit_code = 5

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} at step {step}")


class ConfigError(DeftError):
    """Invalid hyperparameter or configuration value"""
    exit_code = 6


class BudgetError(DeftError):
    """Requested selection budget exceeds what is available"""
    exit_code = 6


class IncompatibleError(DeftError):
    """Parameter sets, masks or vectors are not index-compatible"""
    exit_code = 7


class DimensionalityError(DeftError):
    """An operation received a tensor of the wrong rank"""
    exit_code = 8


class NumericInputError(DeftError):
    """An input contained NaN or infinite values"""
    exit_code = 8


class EmptyObjectiveError(DeftError):
    """Every label in a batch is ignored"""
    exit_code = 8


class EvaluationError(DeftError):
    """Evaluation was requested on an empty test set"""
    exit_code = 8


class UndefinedOverlapError(DeftError):
    """Overlap against an empty support"""
    exit_code = 8


class DeftWarning(UserWarning):
    """Non-fatal condition worth surfacing (degenerate mask, spec mismatch)"""
