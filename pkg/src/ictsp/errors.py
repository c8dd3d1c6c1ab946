"""Exception types shared across the package.

Every error raised on a contract violation is a subclass of ICTSPError so CLI
and experiment runners can catch one base class and emit a structured message.
"""


class ICTSPError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ICTSPError):
    """Operand shapes incompatible with the requested operation."""


class ConfigError(ICTSPError):
    """A configuration value violates its documented constraints."""


class CapacityError(ConfigError):
    """More channels requested than a model's embedding tables can hold."""


class IngestionError(ICTSPError):
    """Raw input data could not be parsed; message names row and column."""


class TrainingError(ICTSPError):
    """The training loop hit a non-recoverable numeric state."""


class ExperimentError(ICTSPError):
    """An experiment protocol cannot run on the data it was given."""

    def __init__(self, message: str, reason: str = "experiment-error"):
        super().__init__(message)
        self.reason = reason
