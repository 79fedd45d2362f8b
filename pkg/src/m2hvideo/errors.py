"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class M2HVideoError(Exception):
    """Base class for all package errors."""


class ShapeError(M2HVideoError):
    """Array shape or channel count violates an operation's contract."""


class RangeError(M2HVideoError):
    """Scalar argument (timestep, index) outside its allowed range."""


class OrderingError(RangeError):
    """Timestep arguments violate the required ordering."""


class DataError(M2HVideoError):
    """Dataset content missing, malformed, or inconsistent."""


class ConfigError(M2HVideoError):
    """Configuration file or checkpoint/config mismatch."""


class NumericError(M2HVideoError):
    """Non-finite values or numerically indefinite intermediate results."""


class MetricError(M2HVideoError):
    """Metric preconditions violated (empty mask, zero vector, tiny sets)."""
