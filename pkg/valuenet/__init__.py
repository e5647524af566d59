from .checkpoint import Checkpoint, CheckpointError, read_checkpoint, write_checkpoint
from .network import (
    NetworkShapeError,
    ValueFunction,
    ValueNetwork,
    default_widths,
    init_params,
    param_count,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "NetworkShapeError",
    "ValueFunction",
    "ValueNetwork",
    "default_widths",
    "init_params",
    "param_count",
    "read_checkpoint",
    "write_checkpoint",
]
