"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 3, ``NumericError`` -> 4.
"""


class DataError(ValueError):
    """Malformed input data, files, shapes or configuration."""


class NumericError(ArithmeticError):
    """Non-finite values produced during computation."""
