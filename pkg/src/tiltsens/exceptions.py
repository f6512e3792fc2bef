"""Exception hierarchy shared by every module."""


class TiltsensError(Exception):
    """Base class for all package errors."""


class ConfigError(TiltsensError, ValueError):
    """Malformed or inconsistent run configuration."""


class SchemaError(ConfigError):
    """Column-role schema does not match the input file."""


class ValidationError(TiltsensError, ValueError):
    """Input values violate a domain constraint."""


class InfeasibleSplitError(TiltsensError, ValueError):
    """Fold plan cannot place both arms in every fold."""


class NumericalError(TiltsensError, ArithmeticError):
    """Base class for numerical failures (exit code 3 in the CLI)."""


class TiltOverflowError(NumericalError):
    """``gamma * s(y)`` exceeds the overflow threshold."""

    def __init__(self, message, y=None):
        super().__init__(message)
        self.y = y


class DegenerateFitError(NumericalError):
    """Training data carries no information for the requested fit."""


class NonConvergenceError(NumericalError):
    """Iterative fit stopped before meeting its tolerance."""

    def __init__(self, message, best=None, trace=None):
        super().__init__(message)
        self.best = best
        self.trace = trace or []


class UndefinedWindowError(NumericalError):
    """Every leave-one-out kernel weight vanished for some observation."""


class CalibrationError(NumericalError):
    """Double-bootstrap calibration lost too many replicates."""
