"""
Exception types raised by the qpix library.

Each type refines the builtin it subclasses so callers that only know about
ValueError / ArithmeticError keep working.
"""


class ShapeError(ValueError):
    """Tensor extents or qubit counts do not match."""


class DomainError(ValueError):
    """A value lies outside its allowed range (e.g. a pixel outside [0, 1])."""


class LayoutError(ValueError):
    """A patch layout does not divide the image or the pixel count."""


class PreconditionError(ValueError):
    """An input violates a structural precondition such as orthonormality."""


class FormatError(ValueError):
    """An input file or byte stream is not in the expected format."""


class TruncatedDataError(FormatError):
    """A byte stream ended before the length announced by its header."""


class SizeError(ValueError):
    """A dense representation would exceed the configured size cap."""


class NumericalError(ArithmeticError):
    """A numerical routine failed, e.g. an SVD did not converge."""
