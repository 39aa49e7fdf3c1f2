"""Shared exception types."""


class ShapeError(ValueError):
    """Array dimensions do not satisfy an operation's requirements."""


class ContractError(RuntimeError):
    """An operation was called in a way its contract forbids."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""
