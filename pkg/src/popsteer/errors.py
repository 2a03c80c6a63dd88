"""Exception hierarchy. CLI exit codes hang off these classes."""


class PopSteerError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(PopSteerError):
    """Invalid configuration or usage."""

    exit_code = 1


class DataError(PopSteerError):
    """Malformed input data, violated data preconditions, missing artifacts."""

    exit_code = 2


class ArtifactError(DataError):
    """Missing, stale or version-mismatched artifact file."""


class NumericalError(PopSteerError):
    """Divergence or another numerical failure during training/evaluation."""

    exit_code = 3
