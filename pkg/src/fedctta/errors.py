"""Exception types raised across the simulator."""


class ConfigurationError(ValueError):
    """Invalid configuration value, unknown key or violated constraint."""

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class ShapeError(ValueError):
    """Array dimensions or parameter layouts do not line up."""


class DegenerateVarianceError(ValueError):
    """Batch statistics requested from a single sample."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class UsageError(RuntimeError):
    """An operation was called in the wrong state or mode."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""
