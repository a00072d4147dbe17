"""Exception types shared across the package."""


class MoADepthError(Exception):
    """Base class for package errors."""


class DimensionError(MoADepthError, ValueError):
    """Operand shapes are incompatible for an operation."""


class ParameterError(MoADepthError, ValueError):
    """A hyperparameter or argument is outside its valid range."""


class ContractError(MoADepthError, ValueError):
    """A documented precondition on the inputs does not hold."""


class ConfigurationError(MoADepthError, ValueError):
    """A configuration is inconsistent or incomplete."""


class FormatError(MoADepthError, ValueError):
    """A file on disk does not follow the expected layout."""
