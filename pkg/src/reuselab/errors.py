"""Exception types shared across the package.

Everything derives from ValueError / RuntimeError so callers that do not
care about the distinction can catch the builtin bases.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateInputError(ValueError):
    """Input is degenerate for the operation (e.g. a zero vector where a
    direction is required)."""


class SingularMatrixError(ValueError):
    """Matrix is (numerically) rank deficient where full column rank is
    required."""


class RegimeError(ValueError):
    """Operation invoked outside the configuration regime it is defined for
    (the error-bound machinery requires a single-layer, single-head model)."""


class StateError(RuntimeError):
    """Reuse state is missing or inconsistent for the requested step."""


class FormatError(ValueError):
    """A persisted artifact (weight file, profile, trace) is malformed."""


class ConfigError(ValueError):
    """Run configuration is invalid or incomplete."""
