from hamiltonian import SingularJacobianError

from .backends import (
    BACKEND_CHOICES,
    MAX_DENSE_CONTROLS,
    BackendError,
    GradientConfig,
    GradientEstimate,
    SampleGradient,
    batch_objective,
    central_differences,
    estimate,
    finite_diff_grad,
    grad_implicit,
    grad_jfb,
    grad_unrolled,
    sample_gradient,
)

__all__ = [
    "BACKEND_CHOICES",
    "MAX_DENSE_CONTROLS",
    "BackendError",
    "GradientConfig",
    "GradientEstimate",
    "SampleGradient",
    "SingularJacobianError",
    "batch_objective",
    "central_differences",
    "estimate",
    "finite_diff_grad",
    "grad_implicit",
    "grad_jfb",
    "grad_unrolled",
    "sample_gradient",
]
