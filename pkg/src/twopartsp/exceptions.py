"""Exception hierarchy shared across the package."""


class TwoPartError(Exception):
    """Base class for all package-specific errors."""


class DomainError(TwoPartError):
    """A numeric argument lies outside its mathematical domain."""


class ShapeError(TwoPartError):
    """An array argument has the wrong length or shape."""


class InputError(TwoPartError):
    """Malformed user input (data files, matrices, schedules)."""


class ConfigError(TwoPartError):
    """Invalid configuration (model spec, run options, quadrature settings)."""


class IdentifiabilityError(TwoPartError):
    """The requested model cannot be identified from the given data."""


class UnsupportedFamilyError(TwoPartError):
    """The operation is not defined for the requested process family."""
