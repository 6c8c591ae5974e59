"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the process exit code the command line maps it to.
"""


class Sar2OptError(Exception):
    exit_code = 1


class ConfigError(Sar2OptError, ValueError):
    """Invalid configuration or argument value."""

    exit_code = 2


class ValidationError(Sar2OptError, ValueError):
    """Input data violates an operation's precondition."""

    exit_code = 2


class ShapeError(ValidationError):
    pass


class VocabularyError(ValidationError, KeyError):
    pass


class UpstreamArtifactError(Sar2OptError):
    """A required artifact from an earlier stage is missing or corrupted."""

    exit_code = 3


class NumericalError(Sar2OptError, FloatingPointError):
    """Training or evaluation produced non-finite values."""

    exit_code = 4
