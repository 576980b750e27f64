"""Exception hierarchy shared by the library and the CLI."""


class ActPromptError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(ActPromptError, ValueError):
    exit_code = 2


class ValidationError(ActPromptError, ValueError):
    exit_code = 2


class FormatError(ActPromptError, ValueError):
    exit_code = 2


class SamplingError(ActPromptError, ValueError):
    exit_code = 2


class NumericError(ActPromptError, FloatingPointError):
    exit_code = 3
