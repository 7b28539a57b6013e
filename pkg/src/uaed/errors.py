"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class UaedError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(UaedError):
    """Invalid configuration value, unknown config key, or bad parameter."""


class DataError(UaedError):
    """Malformed or inconsistent input data (labels, audio, manifests)."""


class AlignmentError(UaedError):
    """Feature streams disagree on frame count or rate beyond tolerance."""


class NumericError(UaedError):
    """Numerical failure such as a non-finite loss during training."""
