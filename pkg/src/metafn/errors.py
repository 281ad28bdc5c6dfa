"""Exception types shared across the package."""


class MetafnError(Exception):
    """Base class for all package-specific errors."""


class NotPositiveDefinite(MetafnError):
    """A matrix required to be positive definite is not.

    Usually means the ridge weight is too small or the support set is
    degenerate (duplicate points). Callers must not silently continue.
    """


class LengthMismatch(MetafnError):
    """Two vectors that must share a length do not."""


class DimensionMismatch(MetafnError):
    """Array shapes are incompatible for the requested operation."""


class TapeConsumed(MetafnError):
    """A second reverse sweep was attempted on an already-consumed tape."""


class InsufficientData(MetafnError):
    """A task distribution cannot supply the requested episode."""


class NonFiniteLoss(MetafnError):
    """A loss or gradient became NaN/Inf; the run aborts with diagnostics."""


class ConfigError(MetafnError):
    """Invalid run configuration."""
