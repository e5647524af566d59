from .graph import (
    ClosedTapeError,
    Node,
    NodeBudgetExceeded,
    NonFiniteError,
    ShapeMismatchError,
    Tape,
    TapeError,
    TapeStats,
    detach,
    value_of,
    vjp,
)
from . import ops

__all__ = [
    "ClosedTapeError",
    "Node",
    "NodeBudgetExceeded",
    "NonFiniteError",
    "ShapeMismatchError",
    "Tape",
    "TapeError",
    "TapeStats",
    "detach",
    "ops",
    "value_of",
    "vjp",
]
