from .loop import (
    MAX_TRUE_GRAD_PARAMS,
    AuditSnapshot,
    ControlObjective,
    Incident,
    IterationRecord,
    NeighborhoodRow,
    NonFiniteDirection,
    Objective,
    QuadraticObjective,
    StepEstimate,
    TrainConfig,
    TrainHistory,
    neighborhood_experiment,
    plateaus_monotone,
    sgd_step,
    train,
)
from .schedules import Schedule, StepSizer

__all__ = [
    "AuditSnapshot",
    "ControlObjective",
    "Incident",
    "IterationRecord",
    "MAX_TRUE_GRAD_PARAMS",
    "NeighborhoodRow",
    "NonFiniteDirection",
    "Objective",
    "QuadraticObjective",
    "Schedule",
    "StepEstimate",
    "StepSizer",
    "TrainConfig",
    "TrainHistory",
    "neighborhood_experiment",
    "plateaus_monotone",
    "sgd_step",
    "train",
]
