"""Exception hierarchy for vestido.

Every error raised by the library derives from `VestidoError` and from the
closest builtin exception, so callers can catch either. Each class carries
the process exit code the CLI uses when the error escapes a command.
"""


class VestidoError(Exception):
    """Base class for all vestido errors."""

    exit_code = 1


class UsageError(VestidoError, ValueError):
    """Bad command-line usage, such as an unknown ablation mode."""

    exit_code = 2


class ConfigurationError(VestidoError, ValueError):
    """Invalid configuration value or unknown configuration key."""

    exit_code = 3


class ValidationError(VestidoError, ValueError):
    """Input data outside the accepted domain."""

    exit_code = 3


class DimensionError(ValidationError):
    """Tensor shapes that do not fit together."""


class NoGraphError(VestidoError, RuntimeError):
    """Backward was called on a tensor with no autodiff graph."""

    exit_code = 5


class MissingGradientError(VestidoError, RuntimeError):
    """An optimizer step found a parameter without a gradient."""

    exit_code = 5


class ModelNotReadyError(VestidoError, RuntimeError):
    """Sampling was requested from weights that were never trained or loaded."""

    exit_code = 3


class NumericalError(VestidoError, ArithmeticError):
    """Non-finite values or a numerically degenerate computation."""

    exit_code = 5


class DatasetError(VestidoError, OSError):
    """A dataset or checkpoint file is missing or unreadable."""

    exit_code = 4


class IntegrityError(DatasetError):
    """A file exists but its checksum or header does not match."""


class DependencyError(VestidoError, FileNotFoundError):
    """A command needs an upstream artifact that does not exist yet."""

    exit_code = 4
