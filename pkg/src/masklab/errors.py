"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, data errors -> 2,
numerical failures -> 3.
"""


class MaskLabError(Exception):
    """Base class for all package errors."""


class UsageError(MaskLabError):
    """Bad command-line arguments or config values."""


class DataError(MaskLabError):
    """Missing, malformed, or inconsistent input data."""


class ShapeError(MaskLabError):
    """Array shape mismatch; message names the offending layer/op."""


class NumericalError(MaskLabError):
    """NaN/Inf encountered where finite values are required."""
