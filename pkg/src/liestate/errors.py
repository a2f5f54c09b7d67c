"""Exception types shared across the package."""


class LieStateError(Exception):
    """Base class for package errors."""


class ShapeError(LieStateError, ValueError):
    """Rejected input: wrong shape, field, or dimension."""


class NumericRangeError(LieStateError, ArithmeticError):
    """A computation left its numerically safe range (overflow, singular system)."""


class RankDeficientError(NumericRangeError):
    """Input matrix is (numerically) rank deficient."""


class InvalidTangentError(LieStateError, ValueError):
    """A matrix expected to lie in the Lie algebra does not."""


class ConfigError(LieStateError, ValueError):
    """Invalid run configuration."""


class DataError(LieStateError, ValueError):
    """Corpus or split unusable for the requested operation."""


class NumericAbort(LieStateError, RuntimeError):
    """Training aborted after too many consecutive non-finite gradients."""


class CheckpointError(LieStateError, ValueError):
    """Checkpoint unreadable or incompatible with the requested data/config."""
