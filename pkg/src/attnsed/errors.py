"""Exception types shared across the toolkit.

Every error the CLI can surface maps to one of these classes so the
command layer can emit a stable, machine-parseable category.
"""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""

    category = "internal"


class DimensionError(ToolkitError):
    """Shapes of operands do not line up."""

    category = "dimension"


class ParameterError(ToolkitError):
    """An argument value is outside its legal range."""

    category = "parameter"


class ConfigError(ToolkitError):
    """A configuration file or derived setting is invalid."""

    category = "config"


class FormatError(ToolkitError):
    """An input file is malformed or uses an unsupported encoding."""

    category = "format"


class CheckpointError(ToolkitError):
    """A checkpoint is unreadable or does not match the architecture."""

    category = "checkpoint"


class StateError(ToolkitError):
    """An operation was called in a state that cannot support it."""

    category = "state"


class NonFiniteError(ToolkitError):
    """A NaN or Inf appeared where only finite values are allowed."""

    category = "numeric"
