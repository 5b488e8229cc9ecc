"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors are raised by argparse
itself, :class:`DataError` exits with 2 and :class:`NumericalError`
with 3.
"""


class EcrplusError(Exception):
    """Base class for all package errors."""


class DataError(EcrplusError):
    """Malformed, inconsistent or incomplete input data."""


class NumericalError(EcrplusError):
    """A numerical routine failed or was asked for something impossible
    (e.g. a quantile inside a truncated tail)."""


class DegenerateEstimateError(EcrplusError):
    """An estimator hit a boundary where the estimate is degenerate
    (e.g. all risk-factor realisations equal to one)."""
