import numpy as np
from pydantic import Field, model_validator

from tape import ops, value_of

from .models import ControlProblem, DomainError, ProblemParams


class ConsumptionParams(ProblemParams):
    """Wealth and habit-formation model with CRRA utility."""

    r: float = 0.05
    A: float | list[float] = 0.5
    B: float | list[float] = 0.3
    eta_habit: float = Field(0.5, gt=0)
    theta_habit: float = Field(1.0, gt=0)
    delta: float = Field(0.05, ge=0)
    gamma_crra: float = Field(2.0, gt=0)
    eps_term: float = Field(1.0, gt=0)
    m: int = Field(1, ge=1)
    eps_dom: float = Field(1e-4, gt=0)
    wealth_floor: float = Field(1e-3, gt=0)
    u_init_offset: float = Field(0.5, gt=0)
    x0_low: float = 1.0
    x0_high: float = 2.0
    h0_low: float = 0.1
    h0_high: float = 0.3

    @model_validator(mode="after")
    def check_model(self):
        if self.gamma_crra == 1.0:
            raise ValueError("gamma_crra must differ from 1 (the logarithmic case is not modelled)")
        for name in ("A", "B"):
            value = getattr(self, name)
            if isinstance(value, list) and len(value) != self.m:
                raise ValueError(f"{name} must have one diagonal entry per product (m={self.m})")
        if np.any(np.asarray(self.B) < 0):
            raise ValueError("B must be nonnegative")
        return self

    def habit_growth(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.A, dtype=np.float64), (self.m,)).copy()

    def habit_decay(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.B, dtype=np.float64), (self.m,)).copy()


def consumption_foc_residual(params: ConsumptionParams, t, x, h, u, p_x, p_h) -> np.ndarray:
    """First-order condition of the utility-maximizing Hamiltonian, one agent.

    e^{-delta t} (u - h)^{-gamma} - p_x + A eta p_h u^{eta - 1}, componentwise in
    the m products. The multipliers are the economic (utility) costates.
    """
    h = np.asarray(h, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= h) or np.any(u <= 0):
        raise DomainError(f"consumption must exceed habit and zero: u={u}, h={h}")
    A = params.habit_growth()
    return (
        np.exp(-params.delta * t) * (u - h) ** (-params.gamma_crra)
        - p_x
        + A * params.eta_habit * np.asarray(p_h, dtype=np.float64) * u ** (params.eta_habit - 1.0)
    )


class ConsumptionProblem(ControlProblem):
    """Agents each hold wealth x and m habit levels h; they choose consumption u > h.

    The library minimizes cost, so L and G are the negated discounted CRRA
    utilities. State per agent is laid out as (x, h_1, ..., h_m).
    """

    name = "consumption"
    u_domain = "above_habit"

    def __init__(self, params: ConsumptionParams | None = None, agents: int = 1, horizon: float = 1.0):
        super().__init__(agents, horizon)
        self.params = params or ConsumptionParams()
        self.state_per_agent = 1 + self.params.m
        self.control_per_agent = self.params.m
        self.A = self.params.habit_growth()
        self.B = self.params.habit_decay()

    def _split(self, z):
        Z = self.agent_blocks(z, self.state_per_agent)
        return Z[:, 0], Z[:, 1:]

    def _habit(self, z):
        _, H = self._split(z)
        return ops.reshape(H, (self.m,))

    def dynamics(self, t, z, u):
        q = self.params
        x, H = self._split(z)
        U = self.agent_blocks(u, q.m)
        wealth = x * q.r - ops.sum(U, axis=1)
        habit = self.A * ops.power(U, q.eta_habit) - self.B * ops.power(ops.clamp(H, 0.0), q.theta_habit)
        joined = ops.concat([ops.reshape(wealth, (self.agents, 1)), habit], axis=1)
        return ops.reshape(joined, (self.n,))

    def _utility_weight(self, t):
        q = self.params
        return -np.exp(-q.delta * t) / (1.0 - q.gamma_crra)

    def running_cost(self, t, z, u):
        surplus = u - self._habit(z)
        return self._utility_weight(t) * ops.sum(ops.power(surplus, 1.0 - self.params.gamma_crra))

    def terminal_cost(self, z):
        q = self.params
        x, _ = self._split(z)
        wealth = ops.clamp(x, q.wealth_floor)
        return (q.eps_term * self._utility_weight(self.T)) * ops.sum(ops.power(wealth, 1.0 - q.gamma_crra))

    def grad_u_running_cost(self, t, z, u):
        q = self.params
        surplus = u - self._habit(z)
        return -np.exp(-q.delta * t) * ops.power(surplus, -q.gamma_crra)

    def grad_u_costate_dynamics(self, t, z, u, p):
        q = self.params
        P = self.agent_blocks(p, self.state_per_agent)
        p_x = ops.reshape(P[:, 0:1] * np.ones(q.m), (self.m,))
        p_h = ops.reshape(P[:, 1:], (self.m,))
        growth = np.tile(self.A * q.eta_habit, self.agents)
        return p_h * growth * ops.power(u, q.eta_habit - 1.0) - p_x

    def lower_bound(self, z):
        return ops.clamp(self._habit(z), 0.0) + self.params.eps_dom

    def project(self, z, u):
        return ops.clamp(u, self.lower_bound(z))

    def check_admissible(self, z, u):
        h = value_of(self._habit(value_of(z)))
        u = value_of(u)
        if np.any(u <= h) or np.any(u <= 0):
            worst = int(np.argmin(u - np.maximum(h, 0.0)))
            raise DomainError(f"consumption u[{worst}]={u[worst]:.6g} is not above habit h[{worst}]={h[worst]:.6g}")

    def initial_control(self, z):
        h = value_of(self._habit(value_of(z)))
        return np.maximum(h, 0.0) + self.params.u_init_offset

    def sample(self, rng, size):
        q = self.params
        states = np.empty((size, self.agents, self.state_per_agent))
        states[:, :, 0] = rng.uniform(q.x0_low, q.x0_high, size=(size, self.agents))
        states[:, :, 1:] = rng.uniform(q.h0_low, q.h0_high, size=(size, self.agents, q.m))
        return states.reshape(size, self.n)
