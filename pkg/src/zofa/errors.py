"""Exception types shared across the package."""


class ZofaError(Exception):
    """Base class for all package errors."""


class ShapeError(ZofaError, ValueError):
    """An input tensor does not match the shape a contract requires."""


class ConfigError(ZofaError, ValueError):
    """A configuration value or combination violates a contract."""


class CapabilityError(ZofaError, RuntimeError):
    """An operation was asked to handle something it does not support."""


class NumericalError(ZofaError, RuntimeError):
    """A computation produced non-finite values or diverged."""
