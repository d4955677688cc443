"""Exception hierarchy shared across the package."""


class EchoRegError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(EchoRegError):
    """Operands have incompatible shapes or sizes."""


class LabelError(EchoRegError):
    """A mask carries labels outside the expected value set."""


class FieldFormatError(EchoRegError):
    """A displacement-field file is malformed or corrupt."""


class UndefinedMetricError(EchoRegError):
    """A metric has no defined value for the given input (e.g. empty class)."""


class ConfigError(EchoRegError):
    """Invalid configuration or hyperparameter value."""


class CheckpointError(EchoRegError):
    """Checkpoint is missing, unreadable, or does not match its config."""


class DataError(EchoRegError):
    """Dataset files are missing, malformed, or inconsistent."""
