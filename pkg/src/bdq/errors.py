class BDQError(Exception):
    """Base class for toolkit errors."""


class ParameterError(BDQError, ValueError):
    """Invalid argument value or shape."""


class DomainError(BDQError, ValueError):
    """Input outside the mathematical domain of an operation."""


class DegenerateInputError(DomainError):
    """Input with an all-zero row, column or group where one is not allowed."""


class UnsupportedDimensionError(ParameterError):
    """Dimension the requested construction cannot handle."""


class DivergenceError(BDQError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
