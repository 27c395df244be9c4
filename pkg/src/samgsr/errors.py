"""Exception types shared across the package.

The CLI maps each class to its own exit status, so raise the most specific one.
"""


class SamgsrError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SamgsrError, ValueError):
    """Malformed or inconsistent input files and arguments."""


class DegenerateDataError(SamgsrError, ValueError):
    """Inputs are well-formed but carry no usable statistical information."""
