"""Exception types shared across the package."""


class MetafitError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MetafitError):
    """Arguments violate a documented precondition (wrong shape, non-finite, ...)."""


class InvalidCameraError(InvalidInputError):
    """Weak-perspective scale is not strictly positive."""


class DegenerateShapeError(MetafitError):
    """Shape coefficients produce a nonpositive bone length."""


class NumericOverflowError(MetafitError):
    """A non-finite value appeared inside an energy evaluation."""


class DivergedError(MetafitError):
    """Refinement produced non-finite parameters mid-run.

    Carries the per-iteration trace accumulated up to the failure so the
    blow-up can be inspected.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class TrainingDivergenceError(MetafitError):
    """Meta-training produced a non-finite outer gradient."""


class AlignmentDegenerateError(MetafitError):
    """Point sets are too degenerate for a similarity alignment."""


class UndefinedCorrelationError(MetafitError):
    """Rank correlation is undefined (constant inputs)."""


class ConfigError(MetafitError):
    """A configuration value or file is invalid."""
