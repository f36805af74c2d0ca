"""Shared exception types.

Every contract violation raises one of these instead of letting numpy
errors or silent NaNs escape.
"""


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NonFiniteError(ArithmeticError):
    """A completed operation produced NaN or Inf."""


class UsageError(RuntimeError):
    """API called outside its stated preconditions."""


class IndexTokenError(IndexError):
    """Token or target id outside the vocabulary."""


class CapacityError(ValueError):
    """Sequence does not fit max_positions (or the compression-slot block)."""


class GranularityError(ValueError):
    """Granularity outside the valid range for the instance."""


class CacheInvalidError(RuntimeError):
    """Prefill cache used with weights other than the ones that built it."""


class DataError(ValueError):
    """Missing or inconsistent artifact data (names the offending id)."""


class ConfigError(ValueError):
    """Infeasible or malformed configuration."""


class CheckpointError(ValueError):
    """Malformed checkpoint container or unsupported version."""
