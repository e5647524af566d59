from .integrate import (
    TRACK_MODE_CHOICES,
    Adjoint,
    Grid,
    RolloutError,
    Trajectory,
    UntrackedTrajectoryError,
    discrete_adjoint,
    rollout,
)

__all__ = [
    "TRACK_MODE_CHOICES",
    "Adjoint",
    "Grid",
    "RolloutError",
    "Trajectory",
    "UntrackedTrajectoryError",
    "discrete_adjoint",
    "rollout",
]
