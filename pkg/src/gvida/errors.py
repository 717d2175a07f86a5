class GvidaError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(GvidaError, ValueError):
    pass


class FormatError(GvidaError, ValueError):
    pass


class NumericError(GvidaError, ArithmeticError):
    pass


class ConfigurationError(GvidaError, ValueError):
    pass


class PriorEstimationError(GvidaError, ValueError):
    pass
