"""Exception types shared across the package."""


class PanlinError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PanlinError):
    """Axis or extent mismatch between tensors; message names the offending axis."""


class ConfigError(PanlinError):
    """Invalid configuration value (divisibility, geometry, class sets, ...)."""


class UsageError(PanlinError):
    """API misuse: unknown operation id, undefined input, malformed file."""


class NumericError(PanlinError):
    """Non-finite values where finite arithmetic is required."""
