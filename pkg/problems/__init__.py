from .bicycle import BicycleParams, BicycleProblem
from .consumption import ConsumptionParams, ConsumptionProblem, consumption_foc_residual
from .lqr import LQRParams, LQRProblem, QuadraticValue, RiccatiSolution, lqr_riccati
from .models import (
    ControlProblem,
    DomainError,
    NotPositiveDefiniteError,
    ProblemError,
    ProblemParams,
    UnknownProblemError,
)
from .quadrotor import QuadrotorParams, QuadrotorProblem
from .registry import PROBLEM_CHOICES, make_problem, params_model

__all__ = [
    "BicycleParams",
    "BicycleProblem",
    "ConsumptionParams",
    "ConsumptionProblem",
    "ControlProblem",
    "DomainError",
    "LQRParams",
    "LQRProblem",
    "NotPositiveDefiniteError",
    "PROBLEM_CHOICES",
    "ProblemError",
    "ProblemParams",
    "QuadraticValue",
    "QuadrotorParams",
    "QuadrotorProblem",
    "RiccatiSolution",
    "UnknownProblemError",
    "consumption_foc_residual",
    "lqr_riccati",
    "make_problem",
    "params_model",
]
