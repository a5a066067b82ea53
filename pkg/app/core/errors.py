from typing import Optional


class RiskEngineError(Exception):
    """Base class for all engine failures. Carries the CLI exit code."""
    exit_code: int = 1


class InputDataError(RiskEngineError, ValueError):
    """Unreadable or invalid input data (exit code 1)."""
    exit_code = 1


class ConfigurationError(InputDataError):
    """Invalid run or calibration configuration."""


class NumericalError(RiskEngineError, ArithmeticError):
    """A numerical procedure could not produce a valid result (exit code 2)."""
    exit_code = 2


class StageError(RiskEngineError):
    """Failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"stage '{stage}' failed: {cause}")


def row_error(row_number: int, reason: str, path: Optional[str] = None) -> InputDataError:
    """Build an InputDataError naming the offending row (header is row 1)."""
    where = f"{path}: " if path else ""
    return InputDataError(f"{where}row {row_number}: {reason}")
