"""Exception hierarchy shared across the package."""


class GavdError(Exception):
    """Base class for all package errors."""


class ShapeError(GavdError, ValueError):
    pass


class DegenerateDistribution(GavdError, ValueError):
    pass


class EmptyInput(GavdError, ValueError):
    pass


class DegenerateLabels(GavdError, ValueError):
    pass


class DegenerateHidden(GavdError, ValueError):
    pass


class InvalidCost(GavdError, ValueError):
    pass


class SelectionMismatch(GavdError, ValueError):
    pass


class DegenerateRedistribution(GavdError, ValueError):
    pass


class EmptyKeyframes(GavdError, ValueError):
    pass


class TargetNotFound(GavdError, KeyError):
    pass


class UnsupportedVersion(GavdError, ValueError):
    pass


class ValidationError(GavdError, ValueError):
    """Dump validation failure. ``field`` names the offending field; ``index`` locates it."""

    def __init__(self, message: str, field: str | None = None, index: tuple | None = None):
        super().__init__(message)
        self.field = field
        self.index = index


class TrainingDiverged(GavdError, RuntimeError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step
