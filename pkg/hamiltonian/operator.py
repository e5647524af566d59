import logging
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from tape import Tape, ops, value_of
from valuenet import ValueFunction

logger = logging.getLogger(__name__)


class FixedPointDivergence(ArithmeticError):
    def __init__(self, t: float, z, iteration: int):
        self.t = float(t)
        self.z = np.array(value_of(z), dtype=np.float64)
        self.iteration = iteration
        preview = np.array2string(self.z[:6], precision=4)
        super().__init__(f"non-finite fixed-point iterate at t={self.t:.4g}, iteration {iteration}, z[:6]={preview}")

    def __reduce__(self):
        return type(self), (self.t, self.z, self.iteration)


class SingularJacobianError(ArithmeticError):
    """I - dT/du is not safely invertible because T is not contractive in u."""

    def __init__(self, spectral_radius: float, t: float | None = None):
        self.spectral_radius = float(spectral_radius)
        self.t = t
        where = "" if t is None else f" at t={t:.4g}"
        super().__init__(f"dT/du has largest singular value {self.spectral_radius:.6g} >= 1{where}")

    def __reduce__(self):
        return type(self), (self.spectral_radius, self.t)


class OperatorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    eta: float = Field(0.01, gt=0)
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(500, ge=1)
    warm_start: bool = True


@dataclass
class FixedPointResult:
    u_star: np.ndarray
    iters: int
    residual: float
    converged: bool
    history: list[float] = field(default_factory=list)


class HamiltonianOperator:
    """The projected ascent map T(u) = proj(u + eta grad_u H) for one value function.

    The Hamiltonian is H = -<p, f> - L with costate p = grad_z phi(t, z), so
    grad_u H = -(grad_u L + grad_u <p, f>). Every method takes theta, z and u
    as arrays or tape nodes; with arrays nothing is recorded.
    """

    def __init__(self, problem, value_fn, cfg: OperatorConfig | None = None):
        if not isinstance(value_fn, ValueFunction):
            raise TypeError(f"{type(value_fn).__name__} does not provide theta, eval_phi and grad_z_phi")
        self.problem = problem
        self.value_fn = value_fn
        self.cfg = cfg or OperatorConfig()

    @property
    def num_controls(self) -> int:
        return self.problem.m

    def costate(self, theta, t, z):
        return self.value_fn.grad_z_phi(theta, t, z)

    def grad_u_H(self, theta, t, z, u, p=None):
        self.problem.check_admissible(z, u)
        if p is None:
            p = self.costate(theta, t, z)
        return -self.problem.control_residual(t, z, u, p)

    def apply(self, theta, t, z, u, p=None):
        """One projected ascent step, tagged as a T application on the tape."""
        step = u + self.cfg.eta * self.grad_u_H(theta, t, z, u, p)
        return ops.mark(self.problem.project(z, step))

    def initial_control(self, z, previous=None):
        if previous is not None and self.cfg.warm_start:
            return np.array(previous, dtype=np.float64)
        return self.problem.initial_control(z)

    def solve_fixed_point(self, theta, t, z, u_init=None) -> FixedPointResult:
        """Iterate T without recording anything until the update is below tol."""
        theta = value_of(theta)
        z = value_of(z)
        u = self.problem.initial_control(z) if u_init is None else np.array(u_init, dtype=np.float64)
        u = value_of(self.problem.project(z, u))
        p = value_of(self.costate(theta, t, z))

        history = []
        residual = np.inf
        for iteration in range(1, self.cfg.max_iter + 1):
            new = self.apply(theta, t, z, u, p)
            if not np.all(np.isfinite(new)):
                raise FixedPointDivergence(t, z, iteration)
            residual = float(np.max(np.abs(new - u))) if new.size else 0.0
            history.append(residual)
            u = new
            if residual <= self.cfg.tol:
                return FixedPointResult(u, iteration, residual, True, history)

        logger.debug("fixed point at t=%.4g stopped after %d iterations, residual %.3e", t, self.cfg.max_iter, residual)
        return FixedPointResult(u, self.cfg.max_iter, residual, False, history)

    def hamiltonian(self, theta, t, z, u):
        p = self.costate(theta, t, z)
        return -(ops.dot(p, self.problem.dynamics(t, z, u)) + self.problem.running_cost(t, z, u))

    def hjb_residual(self, theta, t, z, u, step: float = 1e-6) -> float:
        """d/dt phi - H(t, z, u, grad_z phi); zero along an optimal value function."""
        theta, z, u = value_of(theta), value_of(z), value_of(u)
        t_hi = min(t + step, self.problem.T)
        t_lo = max(t - step, 0.0)
        dphi = (value_of(self.value_fn.eval_phi(theta, t_hi, z)) - value_of(self.value_fn.eval_phi(theta, t_lo, z))) / (t_hi - t_lo)
        return float(dphi - value_of(self.hamiltonian(theta, t, z, u)))


# Local-tape helpers. `operator` is anything with `apply(theta, t, z, u)` written
# in tape primitives and a `num_controls` attribute.

def jacobian_u(operator, theta, t, z, u) -> np.ndarray:
    """Dense dT/du (m x m) from m reverse sweeps with basis cotangents."""
    theta, z = value_of(theta), value_of(z)
    m = operator.num_controls
    J = np.zeros((m, m))
    with Tape() as tape:
        u_var = tape.variable(u)
        out = operator.apply(theta, t, z, u_var)
        for i in range(m):
            basis = np.zeros(m)
            basis[i] = 1.0
            J[i] = tape.vjp(out, [u_var], basis)[u_var]
    return J


def theta_rows(operator, theta, t, z, u) -> np.ndarray:
    """Dense M = dT/dtheta (m x p) from m reverse sweeps."""
    theta, z, u = value_of(theta), value_of(z), value_of(u)
    m = operator.num_controls
    M = np.zeros((m, theta.size))
    with Tape() as tape:
        th = tape.variable(theta)
        out = operator.apply(th, t, z, u)
        for i in range(m):
            basis = np.zeros(m)
            basis[i] = 1.0
            M[i] = tape.vjp(out, [th], basis)[th]
    return M


def vjp_theta(operator, theta, t, z, u, cotangent) -> np.ndarray:
    """M' c in a single sweep."""
    theta, z, u = value_of(theta), value_of(z), value_of(u)
    with Tape() as tape:
        th = tape.variable(theta)
        out = operator.apply(th, t, z, u)
        return tape.vjp(out, [th], cotangent)[th]


def fd_step(theta, direction) -> float:
    return 1e-6 * (1.0 + np.linalg.norm(theta)) / (1.0 + np.linalg.norm(direction))


def jvp_theta_fd(operator, theta, t, z, u, direction) -> np.ndarray:
    """M v by a forward difference of T along v."""
    theta, z, u = value_of(theta), value_of(z), value_of(u)
    direction = np.asarray(direction, dtype=np.float64)
    eps = fd_step(theta, direction)
    base = value_of(operator.apply(theta, t, z, u))
    moved = value_of(operator.apply(theta + eps * direction, t, z, u))
    return (moved - base) / eps


def implicit_pullback(operator, theta, t, z, u):
    """Cotangent map c -> y with (I - dT/du)' y = c at a fixed point u.

    Returns the map and the measured largest singular value of dT/du, which
    must stay below one.
    """
    J = jacobian_u(operator, theta, t, z, u)
    radius = float(np.linalg.norm(J, 2)) if J.size else 0.0
    if radius >= 1.0:
        raise SingularJacobianError(radius, t)
    system = (np.eye(J.shape[0]) - J).T

    def pullback(c):
        return np.linalg.solve(system, c)

    return pullback, radius
