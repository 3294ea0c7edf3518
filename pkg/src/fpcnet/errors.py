"""Exception classes shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1 (usage),
DataError and subclasses -> 2, NumericalError -> 3.
"""


class FPCNetError(Exception):
    """Base class for all package errors."""


class ShapeError(FPCNetError, ValueError):
    """Tensor shapes violate an operation's contract."""


class ConfigError(FPCNetError, ValueError):
    """Invalid or inconsistent configuration (bad key, bad value)."""


class DataError(FPCNetError):
    """Problem with input data: files, manifests, masks, tiling."""


class CheckpointError(DataError):
    """Checkpoint file cannot be used."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, unsupported version, or truncated checkpoint."""


class CheckpointShapeError(CheckpointError):
    """Stored tensor disagrees with the shape implied by the config."""


class NumericalError(FPCNetError, RuntimeError):
    """NaN/Inf encountered where the contract forbids it."""
