"""Exception types shared across the package.

Each CLI-facing error carries the process exit code the command line maps it to.
"""


class CascadeError(Exception):
    exit_code = 1


class ConfigError(CascadeError, ValueError):
    """Invalid configuration value, unknown key, or inconsistent profile."""

    exit_code = 2


class CheckpointError(CascadeError):
    """Corrupt checkpoint, wrong stage tag, or incompatible tensor shapes."""

    exit_code = 3


class DataError(CascadeError, ValueError):
    """Bad input data: out-of-vocabulary tokens, impossible crops, unreadable clips."""

    exit_code = 4


class DimensionError(CascadeError, ValueError):
    exit_code = 2


class UsageError(CascadeError, ValueError):
    """An operation was called with arguments that violate its contract."""

    exit_code = 2


class TrainingError(CascadeError, RuntimeError):
    """Training diverged (non-finite loss)."""
