"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class InputError(ValueError):
    """A value violates an operation's preconditions."""


class NumericError(ArithmeticError):
    """A NaN or infinity reached a place that must stay finite."""


class StateError(RuntimeError):
    """An object is used outside its valid lifecycle (stale record, missing arrivals, ...)."""


class FormatError(ValueError):
    """A file does not match its declared binary format."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""
