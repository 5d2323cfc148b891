"""Exception types shared across the package.

The CLI maps these onto exit codes: data/usage problems exit with 2,
numerical failures with 3.
"""


class BunchingError(Exception):
    """Base class for all package errors."""


class DomainError(BunchingError, ValueError):
    """A parameter or argument is outside its admissible domain."""


class DataError(BunchingError, ValueError):
    """Input data is malformed, inconsistent, or insufficient."""


class NumericalError(BunchingError, RuntimeError):
    """A numerical routine failed (non-convergence, singularity, bad bracket)."""
