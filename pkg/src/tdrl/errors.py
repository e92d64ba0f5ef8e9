"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TDRLError(Exception):
    exit_code = 1


class ConfigError(TDRLError, ValueError):
    """Invalid configuration, spec, or input shape (exit code 2)."""

    exit_code = 2


class ArtifactIOError(TDRLError, OSError):
    """Unreadable, missing, or corrupt artifact on disk (exit code 3)."""

    exit_code = 3


class NumericalError(TDRLError, ArithmeticError):
    """Non-finite values or a failed numerical solve (exit code 4)."""

    exit_code = 4
