from .operator import (
    FixedPointDivergence,
    FixedPointResult,
    HamiltonianOperator,
    OperatorConfig,
    SingularJacobianError,
    fd_step,
    implicit_pullback,
    jacobian_u,
    jvp_theta_fd,
    theta_rows,
    vjp_theta,
)

__all__ = [
    "FixedPointDivergence",
    "FixedPointResult",
    "HamiltonianOperator",
    "OperatorConfig",
    "SingularJacobianError",
    "fd_step",
    "implicit_pullback",
    "jacobian_u",
    "jvp_theta_fd",
    "theta_rows",
    "vjp_theta",
]
