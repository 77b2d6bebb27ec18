"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, DataFormatError
(and other I/O failures) exit 2, NumericalError exits 3.
"""


class DataFormatError(Exception):
    """Malformed or inconsistent on-disk data."""


class NumericalError(Exception):
    """Non-finite values or diverging optimization."""
