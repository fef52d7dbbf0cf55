"""Exception types shared across the package."""


class GraphBuildError(ValueError):
    """Raised when a graph cannot be constructed from the given inputs."""


class SchemaError(ValueError):
    """Raised when a serialized document violates the expected schema.

    The message names the offending field path.
    """


class ShapeError(ValueError):
    """Raised on tensor shape or index mismatches."""


class ConfigError(ValueError):
    """Raised when a configuration value is invalid."""


class TrainingError(RuntimeError):
    """Raised when a training run cannot continue (e.g. non-finite loss)."""
