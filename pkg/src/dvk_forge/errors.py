"""Exception types shared across the package."""


class DvkError(Exception):
    """Base class for all package errors."""


class ShapeError(DvkError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DegenerateInputError(DvkError, ValueError):
    """Input has no spread or violates a domain precondition."""


class FormatError(DvkError, ValueError):
    """A file does not follow the expected binary or text layout."""


class NumericalError(DvkError, ArithmeticError):
    """A NaN or infinity appeared where only finite values are allowed."""
