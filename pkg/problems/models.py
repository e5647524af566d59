import logging

import numpy as np
from pydantic import BaseModel, ConfigDict

from tape import ops

logger = logging.getLogger(__name__)


class ProblemError(Exception):
    pass


class DomainError(ProblemError, ValueError):
    pass


class UnknownProblemError(ProblemError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown problem"


class NotPositiveDefiniteError(ProblemError, ValueError):
    pass


class ProblemParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ControlProblem:
    """Dynamics, costs and initial-state distribution of one control problem.

    Subclasses write `dynamics`, `running_cost` and `terminal_cost` in tape
    primitives so they can be differentiated, and hand-derive the two control
    gradients the Hamiltonian needs. Instances are immutable after
    construction.
    """

    name = "base"
    u_domain = "free"
    state_per_agent = 0
    control_per_agent = 0

    def __init__(self, agents: int = 1, horizon: float = 1.0):
        if agents < 1:
            raise ProblemError(f"agents must be at least 1, got {agents}")
        if horizon <= 0:
            raise ProblemError(f"horizon must be positive, got {horizon}")
        self.agents = agents
        self.T = float(horizon)

    @property
    def n(self) -> int:
        return self.state_per_agent * self.agents

    @property
    def m(self) -> int:
        return self.control_per_agent * self.agents

    def dynamics(self, t: float, z, u):
        raise NotImplementedError

    def running_cost(self, t: float, z, u):
        raise NotImplementedError

    def terminal_cost(self, z):
        raise NotImplementedError

    def grad_u_running_cost(self, t: float, z, u):
        raise NotImplementedError

    def grad_u_costate_dynamics(self, t: float, z, u, p):
        """Gradient in u of <p, f(t, z, u)>."""
        raise NotImplementedError

    def control_residual(self, t: float, z, u, p):
        """grad_u L + grad_u <p, f>; zero at an interior maximizer of the Hamiltonian."""
        return self.grad_u_running_cost(t, z, u) + self.grad_u_costate_dynamics(t, z, u, p)

    def project(self, z, u):
        return u

    def check_admissible(self, z, u):
        pass

    def initial_control(self, z) -> np.ndarray:
        return np.zeros(self.m)

    def exact_maximizer(self, t: float, z, p):
        return None

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def sample_states(self, seed: int, size: int) -> np.ndarray:
        return self.sample(np.random.default_rng(seed), size)

    # multi-agent helpers

    def agent_blocks(self, v, width: int):
        """View a flat per-agent vector as (agents, width)."""
        return ops.reshape(v, (self.agents, width))

    def pairwise_interaction(self, positions, scale: float, sigma: float):
        """scale * sum_{i<j} exp(-|pos_i - pos_j|^2 / sigma^2) over agent positions."""
        if self.agents < 2 or scale == 0.0:
            return 0.0
        first, second = np.triu_indices(self.agents, k=1)
        diff = positions[first] - positions[second]
        dist2 = ops.sum(diff * diff, axis=1)
        return scale * ops.sum(ops.exp(dist2 * (-1.0 / sigma**2)))

    def describe(self) -> dict:
        return {"name": self.name, "agents": self.agents, "n": self.n, "m": self.m, "T": self.T, "u_domain": self.u_domain}

    def __repr__(self):
        return f"{type(self).__name__}(agents={self.agents}, n={self.n}, m={self.m}, T={self.T})"


def column_stack(columns, rows: int):
    """Join per-agent columns (each of shape (rows,)) into a flat row-major vector."""
    joined = ops.concat([ops.reshape(c, (rows, 1)) for c in columns], axis=1)
    return ops.reshape(joined, (rows * len(columns),))

