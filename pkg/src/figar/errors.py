class ConfigurationError(ValueError):
    """Raised when a component is constructed or called with invalid settings."""


class UsageError(RuntimeError):
    """Raised when an object is used out of order (e.g. backward before forward)."""


class NumericError(FloatingPointError):
    """Raised when a computation produces non-finite values."""
