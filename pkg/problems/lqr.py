import logging
from dataclasses import dataclass

import numpy as np
from pydantic import Field

from tape import ops, value_of

from .models import ControlProblem, NotPositiveDefiniteError, ProblemError, ProblemParams

logger = logging.getLogger(__name__)


class LQRParams(ProblemParams):
    A: list[list[float]] = Field(default_factory=lambda: [[0.0]])
    B: list[list[float]] = Field(default_factory=lambda: [[1.0]])
    Q: list[list[float]] = Field(default_factory=lambda: [[0.0]])
    R: list[list[float]] = Field(default_factory=lambda: [[1.0]])
    Q_T: list[list[float]] = Field(default_factory=lambda: [[1.0]])
    x0_low: float = -1.0
    x0_high: float = 1.0


def _check_pd(R: np.ndarray, name: str = "R"):
    if not np.allclose(R, R.T, atol=1e-12):
        raise NotPositiveDefiniteError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(f"{name} must be positive definite") from None


def _check_psd(M: np.ndarray, name: str):
    if not np.allclose(M, M.T, atol=1e-12):
        raise NotPositiveDefiniteError(f"{name} must be symmetric")
    lowest = float(np.linalg.eigvalsh(M).min()) if M.size else 0.0
    if lowest < -1e-12 * max(1.0, float(np.abs(M).max())):
        raise NotPositiveDefiniteError(f"{name} must be positive semidefinite, smallest eigenvalue {lowest:.4g}")


@dataclass(frozen=True)
class RiccatiSolution:
    gains: np.ndarray      # (N, m, n), u_k = -K_k z_k
    values: np.ndarray     # (N + 1, n, n), V_k(z) = 0.5 z' P_k z
    dt: float

    @property
    def steps(self) -> int:
        return len(self.gains)

    def cost(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(0.5 * x @ self.values[0] @ x)

    def value_matrix(self, t: float) -> np.ndarray:
        """P(t), linear between grid points."""
        s = float(np.clip(t / self.dt, 0.0, self.steps))
        k = min(int(np.floor(s)), self.steps - 1)
        w = s - k
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]


def lqr_riccati(A, B, Q, R, Q_T, T: float, N: int) -> RiccatiSolution:
    """Backward Riccati recursion for the forward-Euler discretization.

    On the grid t_k = k T / N the discrete problem has A_d = I + dt A,
    B_d = dt B and stage costs dt Q, dt R, which is exactly what a rollout
    integrates, so the returned cost is the optimum of that rollout.
    """
    A, B, Q, R, Q_T = (np.atleast_2d(np.asarray(M, dtype=np.float64)) for M in (A, B, Q, R, Q_T))
    if N < 1:
        raise ProblemError(f"N must be at least 1, got {N}")
    _check_pd(R)
    n, m = B.shape
    if A.shape != (n, n) or Q.shape != (n, n) or Q_T.shape != (n, n) or R.shape != (m, m):
        raise ProblemError(f"inconsistent LQR shapes A{A.shape} B{B.shape} Q{Q.shape} R{R.shape} Q_T{Q_T.shape}")
    _check_psd(Q, "Q")
    _check_psd(Q_T, "Q_T")

    dt = T / N
    Ad = np.eye(n) + dt * A
    Bd = dt * B
    Qd, Rd = dt * Q, dt * R

    values = np.empty((N + 1, n, n))
    gains = np.empty((N, m, n))
    P = Q_T.copy()
    values[N] = P
    for k in range(N - 1, -1, -1):
        K = np.linalg.solve(Rd + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
        P = Qd + Ad.T @ P @ (Ad - Bd @ K)
        P = 0.5 * (P + P.T)
        gains[k] = K
        values[k] = P
    return RiccatiSolution(gains=gains, values=values, dt=dt)


class QuadraticValue:
    """phi(t, z) = 0.5 z' P(t) z from a Riccati solution; has no parameters."""

    def __init__(self, solution: RiccatiSolution):
        self.solution = solution
        self.theta = np.zeros(0)

    @property
    def num_params(self) -> int:
        return 0

    def eval_phi(self, theta, t, z):
        P = self.solution.value_matrix(t)
        return 0.5 * ops.dot(z, P @ z)

    def grad_z_phi(self, theta, t, z):
        return self.solution.value_matrix(t) @ z


class LQRProblem(ControlProblem):
    """z' = A z + B u with L = 0.5 z'Qz + 0.5 u'Ru and G = 0.5 z'Q_T z.

    Several agents share the same matrices in a block-diagonal system.
    """

    name = "lqr"

    def __init__(self, params: LQRParams | None = None, agents: int = 1, horizon: float = 1.0):
        super().__init__(agents, horizon)
        self.params = params or LQRParams()
        A, B, Q, R, Q_T = (np.atleast_2d(np.asarray(M, dtype=np.float64)) for M in (
            self.params.A, self.params.B, self.params.Q, self.params.R, self.params.Q_T))
        _check_pd(R)
        n, m = B.shape
        if A.shape != (n, n) or Q.shape != (n, n) or Q_T.shape != (n, n) or R.shape != (m, m):
            raise ProblemError(f"inconsistent LQR shapes A{A.shape} B{B.shape} R{R.shape}")
        _check_psd(Q, "Q")
        _check_psd(Q_T, "Q_T")
        self.state_per_agent = n
        self.control_per_agent = m

        eye = np.eye(agents)
        self.A = np.kron(eye, A)
        self.B = np.kron(eye, B)
        self.Q = np.kron(eye, Q)
        self.R = np.kron(eye, R)
        self.Q_T = np.kron(eye, Q_T)
        self._R_inv = np.linalg.inv(self.R)

    def dynamics(self, t, z, u):
        return self.A @ z + self.B @ u

    def running_cost(self, t, z, u):
        return 0.5 * ops.dot(z, self.Q @ z) + 0.5 * ops.dot(u, self.R @ u)

    def terminal_cost(self, z):
        return 0.5 * ops.dot(z, self.Q_T @ z)

    def grad_u_running_cost(self, t, z, u):
        return self.R @ u

    def grad_u_costate_dynamics(self, t, z, u, p):
        return p @ self.B

    def exact_maximizer(self, t, z, p):
        return -self._R_inv @ (self.B.T @ value_of(p))

    def sample(self, rng, size):
        return rng.uniform(self.params.x0_low, self.params.x0_high, size=(size, self.n))

    def riccati(self, N: int) -> RiccatiSolution:
        return lqr_riccati(self.A, self.B, self.Q, self.R, self.Q_T, self.T, N)

    def optimal_value(self, N: int) -> QuadraticValue:
        return QuadraticValue(self.riccati(N))
