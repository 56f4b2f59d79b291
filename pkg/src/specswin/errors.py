"""Exception types shared across the package."""


class SpecswinError(Exception):
    """Base class for all package errors."""


class ShapeError(SpecswinError):
    """Operand shapes are incompatible with an operation's contract."""


class GraphError(SpecswinError):
    """Autodiff graph misuse (e.g. repeated backward without a new forward)."""


class NumericError(SpecswinError):
    """Non-finite values where finite ones are required."""


class ConfigError(SpecswinError):
    """Invalid or unsupported configuration."""


class DataError(SpecswinError):
    """Malformed, missing, or insufficient input data."""


class CheckpointError(SpecswinError):
    """Checkpoint missing, corrupt, or incompatible with the requested model."""
