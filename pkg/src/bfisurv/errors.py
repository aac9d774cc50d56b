"""Exception hierarchy shared by every module.

The CLI maps each top-level class to its own exit status.
"""


class BfiError(Exception):
    """Base class for all package errors."""


class ValidationError(BfiError, ValueError):
    """Input data, schema or configuration is invalid."""


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ValidationError):
    pass


class DomainError(ValidationError):
    """A function was called outside its mathematical domain."""


class NumericalError(BfiError, ArithmeticError):
    """Overflow, non-finite intermediate or a failed numerical routine."""


class QuadratureError(NumericalError):
    def __init__(self, message, achieved=None):
        self.achieved = achieved
        if achieved is not None:
            message = f"{message} (achieved relative change {achieved:.3g})"
        super().__init__(message)


class OptimizationError(NumericalError):
    pass


class CalibrationError(NumericalError):
    pass


class ProtocolError(BfiError):
    """Federation protocol violated: mismatched models, missing centers, bad payloads."""


class AggregationError(ProtocolError):
    pass
