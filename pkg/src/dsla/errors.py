"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes are incompatible."""


class DomainError(ValueError):
    """An argument lies outside its valid range."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class ConfigError(ValueError):
    """A configuration file or mapping is invalid."""
