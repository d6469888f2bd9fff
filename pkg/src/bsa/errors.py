"""Exception hierarchy shared by every module."""


class BSAError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(BSAError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(BSAError):
    """Missing, empty or undecodable input data."""


class ShapeError(BSAError, ValueError):
    """Array shapes or parameter registries do not line up."""


class ArgumentError(BSAError, ValueError):
    """An argument is outside its allowed range."""


class CheckpointError(BSAError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""


class TrainingError(BSAError):
    """Optimization diverged."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class NumericError(BSAError, ArithmeticError):
    """A computed quantity is NaN or infinite."""
