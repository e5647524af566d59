import logging

from pydantic import BaseModel, ValidationError

from .bicycle import BicycleParams, BicycleProblem
from .consumption import ConsumptionParams, ConsumptionProblem
from .lqr import LQRParams, LQRProblem
from .models import ControlProblem, ProblemError, UnknownProblemError
from .quadrotor import QuadrotorParams, QuadrotorProblem

logger = logging.getLogger(__name__)

PROBLEM_CHOICES = [
    ("lqr", "Linear-quadratic regulator (Riccati oracle)"),
    ("quadrotor", "Rigid-body quadrotor swarm"),
    ("bicycle", "Kinematic bicycle swarm"),
    ("consumption", "Consumption-savings with habit formation"),
]

PROBLEM_TYPES = {
    "lqr": (LQRProblem, LQRParams),
    "quadrotor": (QuadrotorProblem, QuadrotorParams),
    "bicycle": (BicycleProblem, BicycleParams),
    "consumption": (ConsumptionProblem, ConsumptionParams),
}


def params_model(name: str) -> type[BaseModel]:
    try:
        return PROBLEM_TYPES[name][1]
    except KeyError:
        valid = ", ".join(key for key, _ in PROBLEM_CHOICES)
        raise UnknownProblemError(f"unknown problem {name!r}; expected one of: {valid}") from None


def make_problem(name: str, agents: int = 1, params=None, horizon: float = 1.0) -> ControlProblem:
    """Build a problem by name; `params` may be a dict or the matching params model."""
    model = params_model(name)
    problem_cls = PROBLEM_TYPES[name][0]
    if agents < 1:
        raise ProblemError(f"agents must be at least 1, got {agents}")
    if params is None:
        params = model()
    elif not isinstance(params, model):
        try:
            params = model.model_validate(dict(params))
        except ValidationError as exc:
            raise ProblemError(f"invalid {name} parameters: {exc}") from exc
    problem = problem_cls(params, agents=agents, horizon=horizon)
    logger.debug("built %r", problem)
    return problem
