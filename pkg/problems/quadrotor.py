import numpy as np
from pydantic import Field

from tape import ops

from .models import ControlProblem, ProblemError, ProblemParams, column_stack


class QuadrotorParams(ProblemParams):
    mass: float = Field(1.0, gt=0)
    gravity: float = Field(9.81, ge=0)
    inertia: tuple[float, float, float] = (0.5, 0.5, 1.0)
    c_u: float = Field(0.1, ge=0)
    c_e: float = Field(0.01, ge=0)
    kappa_e: float = 1.0
    c_z: float = Field(1.0, ge=0)
    c_T: float = Field(50.0, ge=0)
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    c_int: float = Field(0.0, ge=0)
    sigma_int: float = Field(0.5, gt=0)
    pos_box: float = Field(2.0, gt=0)


class QuadrotorProblem(ControlProblem):
    """Rigid-body quadrotors, 12 states and 4 controls each.

    State per agent: position, velocity, Euler angles (roll, pitch, yaw) and
    body rates. Controls: thrust offset from hover and three body torques.
    Angle rates are taken equal to the body rates.
    """

    name = "quadrotor"
    state_per_agent = 12
    control_per_agent = 4

    def __init__(self, params: QuadrotorParams | None = None, agents: int = 1, horizon: float = 1.0):
        super().__init__(agents, horizon)
        self.params = params or QuadrotorParams()
        self.inertia = np.array(self.params.inertia, dtype=np.float64)
        if np.any(self.inertia <= 0):
            raise ProblemError(f"inertia must be positive, got {self.params.inertia}")
        self.target = np.array(self.params.target, dtype=np.float64)

    def _columns(self, M, first, last):
        return [M[:, i] for i in range(first, last)]

    def _body_z_axis(self, Z):
        roll, pitch, yaw = self._columns(Z, 6, 9)
        c_r, s_r = ops.cos(roll), ops.sin(roll)
        c_p, s_p = ops.cos(pitch), ops.sin(pitch)
        c_y, s_y = ops.cos(yaw), ops.sin(yaw)
        return (
            c_r * s_p * c_y + s_r * s_y,
            c_r * s_p * s_y - s_r * c_y,
            c_r * c_p,
        )

    def dynamics(self, t, z, u):
        q = self.params
        Z = self.agent_blocks(z, 12)
        U = self.agent_blocks(u, 4)
        Ix, Iy, Iz = self.inertia
        vel = self._columns(Z, 3, 6)
        rp, rq, rr = self._columns(Z, 9, 12)
        accel = q.gravity + U[:, 0] * (1.0 / q.mass)
        bx, by, bz = self._body_z_axis(Z)
        columns = [
            *vel,
            accel * bx,
            accel * by,
            accel * bz - q.gravity,
            rp, rq, rr,
            ((Iy - Iz) * rq * rr + U[:, 1]) * (1.0 / Ix),
            ((Iz - Ix) * rp * rr + U[:, 2]) * (1.0 / Iy),
            ((Ix - Iy) * rp * rq + U[:, 3]) * (1.0 / Iz),
        ]
        return column_stack(columns, self.agents)

    def _tracking(self, z, weight):
        pos = self.agent_blocks(z, 12)[:, 0:3]
        offset = pos - self.target
        return weight * ops.sum(offset * offset), pos

    def running_cost(self, t, z, u):
        q = self.params
        tracking, pos = self._tracking(z, q.c_z)
        effort = q.c_u * ops.sum(u * u) + q.c_e * ops.sum(ops.exp(u * q.kappa_e))
        return effort + tracking + self.pairwise_interaction(pos, q.c_int, q.sigma_int)

    def terminal_cost(self, z):
        cost, _ = self._tracking(z, self.params.c_T)
        return cost

    def grad_u_running_cost(self, t, z, u):
        q = self.params
        return (2.0 * q.c_u) * u + (q.c_e * q.kappa_e) * ops.exp(u * q.kappa_e)

    def grad_u_costate_dynamics(self, t, z, u, p):
        Z = self.agent_blocks(z, 12)
        P = self.agent_blocks(p, 12)
        bx, by, bz = self._body_z_axis(Z)
        thrust = (P[:, 3] * bx + P[:, 4] * by + P[:, 5] * bz) * (1.0 / self.params.mass)
        Ix, Iy, Iz = self.inertia
        columns = [thrust, P[:, 9] * (1.0 / Ix), P[:, 10] * (1.0 / Iy), P[:, 11] * (1.0 / Iz)]
        return column_stack(columns, self.agents)

    def sample(self, rng, size):
        box = self.params.pos_box
        states = np.zeros((size, self.agents, 12))
        states[:, :, 0:3] = rng.uniform(-box, box, size=(size, self.agents, 3))
        return states.reshape(size, self.n)
