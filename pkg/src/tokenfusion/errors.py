"""Exception hierarchy and CLI exit codes.

Exit code contract: 0 success, 2 configuration error, 3 I/O error,
4 numeric failure.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class TokenFusionError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ShapeMismatchError(TokenFusionError):
    """Tensor shapes are incompatible; the message names the offending axis."""

    exit_code = EXIT_CONFIG


class DivisibilityError(TokenFusionError):
    """An extent is not divisible as required (stride, kernel, or token split)."""

    exit_code = EXIT_CONFIG


class ConfigError(TokenFusionError):
    """Invalid configuration value or combination."""

    exit_code = EXIT_CONFIG


class GraphError(TokenFusionError):
    """Backward requested without a recorded forward graph."""

    exit_code = EXIT_CONFIG


class FeatureFileError(TokenFusionError):
    """Malformed or inconsistent feature container file."""

    exit_code = EXIT_IO


class NumericError(TokenFusionError):
    """A computation produced non-finite values."""

    exit_code = EXIT_NUMERIC
