"""Exception hierarchy shared across the package."""


class TacoError(Exception):
    """Base class for all package errors."""


class DimensionError(TacoError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateNormError(TacoError, ValueError):
    """A token row has (near) zero norm, so cosine distance is undefined."""


class InsufficientTokensError(TacoError, ValueError):
    """Too few tokens (or candidates) to build neighborhoods or negatives."""


class GraphError(TacoError, RuntimeError):
    """Misuse of the differentiation tape (non-scalar root, reused graph...)."""


class ConfigError(TacoError, ValueError):
    """Invalid configuration value or file."""


class CheckpointError(TacoError, ValueError):
    """Corrupt or incompatible checkpoint file.

    ``field`` names the offending header entry when known.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class TrainingError(TacoError, RuntimeError):
    """Optimization aborted (non-finite loss or gradient)."""
