"""
Exception hierarchy for the treatment-policy pipeline.

Every error carries the pipeline stage it surfaced in, optional row/column/
feature/leaf context and the process exit code the CLI maps it to.
"""

from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class PolicyError(Exception):
    """Base class for all pipeline errors."""

    exit_code = EXIT_DATA

    def __init__(self, message: str, stage: Optional[str] = None, **context: Any):
        super().__init__(message)
        self.message = message
        self.stage = stage
        self.context: Dict[str, Any] = context

    def with_stage(self, stage: str) -> "PolicyError":
        """Attach the stage name if none was set where the error was raised."""
        if self.stage is None:
            self.stage = stage
        return self

    def structured_line(self) -> str:
        """Render the single-line error record printed by the CLI."""
        parts = [f"stage={self.stage or 'unknown'}", f"type={type(self).__name__}"]
        parts.extend(f"{key}={value}" for key, value in sorted(self.context.items()))
        parts.append(f"message={self.message}")
        return "ERROR " + " ".join(parts)


class DataError(PolicyError):
    """Input data or configuration is unusable."""

    exit_code = EXIT_DATA


class NumericalError(PolicyError):
    """A computation is degenerate for the data it was given."""

    exit_code = EXIT_NUMERICAL


# Data errors
class MissingColumn(DataError):
    pass


class UnparsableCell(DataError):
    pass


class UnknownTreatment(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class DuplicateId(DataError):
    pass


class InvalidConfig(DataError):
    pass


class InsufficientCompleteRows(DataError):
    pass


class EmptyArm(DataError):
    pass


class TooFewObservations(DataError):
    pass


class TooFewPatients(DataError):
    pass


class TooFewRows(DataError):
    pass


class NoEvents(DataError):
    pass


class InconsistentDimensions(DataError):
    pass


class MissingFeature(DataError):
    pass


# Numerical errors
class NoComparablePairs(NumericalError):
    pass


class EmptyBadSet(NumericalError):
    pass


class EmptyGoodSet(NumericalError):
    pass


class ZeroRealValue(NumericalError):
    pass


class ZeroObservedRate(NumericalError):
    pass


class DegenerateResample(NumericalError):
    pass
