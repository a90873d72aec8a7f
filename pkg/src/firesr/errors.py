"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data/format errors
exit 2, numeric failures exit 3, and I/O failures exit 4.
"""


class FireSrError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 2


class UsageError(FireSrError):
    """Bad flags, missing arguments, or an inconsistent run configuration."""

    exit_code = 1


class DataError(FireSrError):
    """Data violating a contract: nonfinite values, bad ranges, gaps."""

    exit_code = 2


class FormatError(DataError):
    """On-disk container violations: magic, version, header/payload mismatch."""


class GridMismatchError(DataError):
    """Rasters that were required to share a grid do not."""


class NumericError(FireSrError):
    """Numeric failure during computation."""

    exit_code = 3


class DivergenceError(NumericError):
    """Training loss became nonfinite."""
