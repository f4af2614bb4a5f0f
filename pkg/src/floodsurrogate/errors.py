"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ValidationError`` (and subclasses) -> 2,
``NumericalError`` -> 3.
"""


class FloodSurrogateError(Exception):
    """Base class for all package errors."""


class ValidationError(FloodSurrogateError, ValueError):
    """Input data or configuration violates a documented precondition."""


class ParseError(ValidationError):
    """A file could not be parsed."""


class AlignmentError(ValidationError):
    """Two grids that must share georeferencing do not."""


class NumericalError(FloodSurrogateError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class ModelFormatError(FloodSurrogateError):
    """A serialized model is corrupt, truncated or of the wrong version."""
