"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (see cli.py).
"""


class InputError(ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(InputError):
    """A run configuration is malformed, unknown-keyed, or version-mismatched."""


class MissingArtifactError(FileNotFoundError):
    """A prerequisite file (dataset, codebook, checkpoint) is absent or stale."""


class NumericError(ArithmeticError):
    """A non-finite value surfaced where the pipeline requires finite arithmetic."""
