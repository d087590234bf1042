"""Exception types raised across the package."""


class DoteError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DoteError, ValueError):
    """An argument violates a documented precondition."""


class DimensionError(DoteError, ValueError):
    """Array extents are inconsistent with each other."""


class NumericalConsistencyError(DoteError, ArithmeticError):
    """A numerical result failed an internal consistency check."""


class FormatError(DoteError, ValueError):
    """A file is malformed, truncated or of an unexpected kind."""
