"""Exception types raised across the package."""


class FginError(Exception):
    """Base class for all package errors."""


class ShapeError(FginError, ValueError):
    """Tensor shapes disagree.

    ``axis`` names the offending axis (e.g. ``"channels"``) when known.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class NonFiniteError(FginError, FloatingPointError):
    """A NaN or Inf reached an op boundary."""


class ConfigError(FginError, ValueError):
    """Invalid model, training or grouping configuration."""


class DataError(FginError, ValueError):
    """Malformed cube, header or checkpoint file."""


class StateError(FginError, RuntimeError):
    """An op was used before its state was ready (e.g. BN running stats)."""
