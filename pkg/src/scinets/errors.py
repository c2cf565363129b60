"""Exception hierarchy shared by every module.

The CLI maps each class to an exit code and a one-line error prefix.
"""


class ScinetsError(Exception):
    """Base class for all toolkit errors."""

    kind = "error"


class UsageError(ScinetsError):
    kind = "usage"


class ConfigError(ScinetsError, ValueError):
    kind = "config"


class DimensionError(ConfigError):
    """Shapes of operands do not agree."""

    kind = "dimension"


class UndefinedObjectiveError(ConfigError):
    """Every pixel was excluded from a loss or statistic."""

    kind = "undefined"


class FormatError(ScinetsError, ValueError):
    """A binary file is malformed; ``offset`` is the byte position of the fault."""

    kind = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(ScinetsError, ArithmeticError):
    """NaN or inf appeared during training or a forward pass."""

    kind = "runtime"
