import numpy as np
from pydantic import Field

from tape import ops

from .models import ControlProblem, ProblemParams, column_stack


class BicycleParams(ProblemParams):
    wheelbase: float = Field(1.0, gt=0)
    steer_max: float = Field(1.2, gt=0, lt=np.pi / 2)
    c_u: float = Field(0.5, ge=0)
    c_z: float = Field(1.0, ge=0)
    c_T: float = Field(10.0, ge=0)
    target: tuple[float, float] = (0.0, 0.0)
    c_int: float = Field(0.0, ge=0)
    sigma_int: float = Field(0.5, gt=0)
    pos_box: float = Field(2.0, gt=0)
    speed_low: float = 0.5
    speed_high: float = 1.5


class BicycleProblem(ControlProblem):
    """Kinematic bicycles: state (x, y, heading, speed), control (acceleration, steering)."""

    name = "bicycle"
    u_domain = "box"
    state_per_agent = 4
    control_per_agent = 2

    def __init__(self, params: BicycleParams | None = None, agents: int = 1, horizon: float = 1.0):
        super().__init__(agents, horizon)
        self.params = params or BicycleParams()
        self.target = np.array(self.params.target, dtype=np.float64)
        limit = self.params.steer_max
        self.u_low = np.tile([-np.inf, -limit], agents)
        self.u_high = np.tile([np.inf, limit], agents)

    def dynamics(self, t, z, u):
        Z = self.agent_blocks(z, 4)
        U = self.agent_blocks(u, 2)
        heading, speed = Z[:, 2], Z[:, 3]
        columns = [
            speed * ops.cos(heading),
            speed * ops.sin(heading),
            speed * ops.tan(U[:, 1]) * (1.0 / self.params.wheelbase),
            U[:, 0],
        ]
        return column_stack(columns, self.agents)

    def _tracking(self, z, weight):
        pos = self.agent_blocks(z, 4)[:, 0:2]
        offset = pos - self.target
        return weight * ops.sum(offset * offset), pos

    def running_cost(self, t, z, u):
        q = self.params
        tracking, pos = self._tracking(z, q.c_z)
        return q.c_u * ops.sum(u * u) + tracking + self.pairwise_interaction(pos, q.c_int, q.sigma_int)

    def terminal_cost(self, z):
        cost, _ = self._tracking(z, self.params.c_T)
        return cost

    def grad_u_running_cost(self, t, z, u):
        return (2.0 * self.params.c_u) * u

    def grad_u_costate_dynamics(self, t, z, u, p):
        Z = self.agent_blocks(z, 4)
        U = self.agent_blocks(u, 2)
        P = self.agent_blocks(p, 4)
        tan_steer = ops.tan(U[:, 1])
        steer = P[:, 2] * Z[:, 3] * (1.0 + tan_steer * tan_steer) * (1.0 / self.params.wheelbase)
        return column_stack([P[:, 3], steer], self.agents)

    def project(self, z, u):
        return ops.clamp(u, self.u_low, self.u_high)

    def sample(self, rng, size):
        q = self.params
        states = np.empty((size, self.agents, 4))
        states[:, :, 0:2] = rng.uniform(-q.pos_box, q.pos_box, size=(size, self.agents, 2))
        states[:, :, 2] = rng.uniform(-np.pi, np.pi, size=(size, self.agents))
        states[:, :, 3] = rng.uniform(q.speed_low, q.speed_high, size=(size, self.agents))
        return states.reshape(size, self.n)
