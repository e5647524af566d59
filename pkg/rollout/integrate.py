import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from hamiltonian import FixedPointDivergence, implicit_pullback
from tape import Node, Tape, TapeError, detach, ops, value_of

logger = logging.getLogger(__name__)

TRACK_MODE_CHOICES = [
    ("none", "Values only"),
    ("jfb", "One tracked T application on the detached fixed point"),
    ("unrolled", "Every inner iteration tracked"),
    ("implicit", "Tracked T application with the implicit cotangent map"),
]


class RolloutError(ArithmeticError):
    def __init__(self, k: int, state):
        self.k = k
        self.state = np.array(value_of(state), dtype=np.float64)
        preview = np.array2string(self.state[:6], precision=4)
        super().__init__(f"non-finite state at step {k}: z[:6]={preview}")

    def __reduce__(self):
        return type(self), (self.k, self.state)


class UntrackedTrajectoryError(TapeError):
    pass


class Grid(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    N: int = Field(50, ge=1)
    T: float = Field(1.0, gt=0)
    integrator: Literal["euler", "rk4"] = "euler"

    @property
    def dt(self) -> float:
        return self.T / self.N

    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray              # (N + 1, n)
    controls: np.ndarray            # (N, m)
    running_costs: np.ndarray       # (N,)
    objective: float
    track_mode: str = "none"
    adjoints: np.ndarray | None = None
    control_cotangents: np.ndarray | None = None
    iterations: list[int] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)
    # tracked mode only
    tape: Tape | None = None
    objective_node: Node | None = None
    state_nodes: list = field(default_factory=list)
    control_nodes: list = field(default_factory=list)
    theta_nodes: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.controls)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def solves(self) -> int:
        return len(self.iterations)

    @property
    def nonconverged(self) -> int:
        return sum(not c for c in self.converged)

    @property
    def inner_iterations(self) -> int:
        return int(sum(self.iterations))

    def to_rows(self) -> list[dict]:
        """One dict per grid point: k, t, z_i, u_i, L, p_i (blank where undefined)."""
        n = self.states.shape[1]
        m = self.controls.shape[1] if self.controls.ndim == 2 else 0
        rows = []
        for k, t in enumerate(self.times):
            row = {"k": k, "t": float(t)}
            row.update({f"z{i}": float(self.states[k, i]) for i in range(n)})
            on_grid = k < self.steps
            row.update({f"u{i}": float(self.controls[k, i]) if on_grid else "" for i in range(m)})
            row["L"] = float(self.running_costs[k]) if on_grid else ""
            if self.adjoints is not None:
                row.update({f"p{i}": float(self.adjoints[k, i]) for i in range(n)})
            rows.append(row)
        return rows


@dataclass
class Adjoint:
    adjoints: np.ndarray            # p_k = dJ/dz_k, (N + 1, n)
    control_cotangents: np.ndarray  # dt * h_k, (N, m)
    theta_grads: np.ndarray         # dt * (per-step integrand), (N, p)

    @property
    def gradient(self) -> np.ndarray:
        return self.theta_grads.sum(axis=0)


class _Stepper:
    """Computes the control at one (t, z) in the requested track mode."""

    def __init__(self, operator, track_mode: str, detach_z: bool):
        self.op = operator
        self.problem = operator.problem
        self.cfg = operator.cfg
        self.mode = track_mode
        self.detach_z = detach_z
        self.iterations: list[int] = []
        self.converged: list[bool] = []

    def control(self, theta_step, theta, t, z, previous):
        """Returns the control (Node when tracked) for state z, warm started from `previous`."""
        z_value = value_of(z)
        if self.mode == "unrolled":
            return self._unrolled(theta_step, t, z, previous)

        prev_value = None if previous is None else value_of(previous)
        u_init = self.op.initial_control(z_value, prev_value)
        result = self.op.solve_fixed_point(theta, t, z_value, u_init)
        self.iterations.append(result.iters)
        self.converged.append(result.converged)
        if self.mode == "none":
            return result.u_star

        z_in = detach(z) if self.detach_z else z
        u = self.op.apply(theta_step, t, z_in, result.u_star)
        if self.mode == "implicit":
            pullback, _ = implicit_pullback(self.op, theta, t, z_value, result.u_star)
            u = ops.custom_vjp(u, pullback, op="implicit")
        return u

    def _unrolled(self, theta_step, t, z, previous):
        z_in = detach(z) if self.detach_z else z
        if previous is not None and self.cfg.warm_start:
            u = self.problem.project(z_in, previous)
        else:
            u = self.problem.project(z_in, self.problem.initial_control(value_of(z)))
        p = self.op.costate(theta_step, t, z_in)

        converged = False
        iteration = 0
        for iteration in range(1, self.cfg.max_iter + 1):
            new = self.op.apply(theta_step, t, z_in, u, p)
            if not np.all(np.isfinite(value_of(new))):
                raise FixedPointDivergence(t, z, iteration)
            residual = float(np.max(np.abs(value_of(new) - value_of(u)))) if value_of(new).size else 0.0
            u = new
            if residual <= self.cfg.tol:
                converged = True
                break
        self.iterations.append(iteration)
        self.converged.append(converged)
        return u


def _check_state(k, z):
    if not np.all(np.isfinite(value_of(z))):
        raise RolloutError(k, z)


def rollout(operator, theta, x, grid: Grid, track_mode: str = "none", detach_z: bool = False,
            control_offsets=None) -> Trajectory:
    """Integrate the closed loop z' = f(t, z, u*(t, z)) from x and accumulate J.

    In a tracked mode an open Tape is required; every step binds its own leaf
    copy of theta so that one reverse sweep separates the per-step integrands.
    `control_offsets` (N x m) is added to each step's control.
    """
    problem = operator.problem
    if abs(grid.T - problem.T) > 1e-12:
        raise ValueError(f"grid horizon {grid.T} differs from problem horizon {problem.T}")
    if track_mode not in dict(TRACK_MODE_CHOICES):
        raise ValueError(f"unknown track mode {track_mode!r}")
    tracked = track_mode != "none"
    tape = Tape.current()
    if tracked and tape is None:
        raise TapeError(f"track mode {track_mode!r} needs an open Tape")

    theta = np.array(value_of(theta), dtype=np.float64)
    x = np.array(x, dtype=np.float64)
    if x.shape != (problem.n,):
        raise ValueError(f"initial state must have shape ({problem.n},), got {x.shape}")
    offsets = None if control_offsets is None else np.asarray(control_offsets, dtype=np.float64)
    if offsets is not None and offsets.shape != (grid.N, problem.m):
        raise ValueError(f"control offsets must have shape ({grid.N}, {problem.m}), got {offsets.shape}")

    stepper = _Stepper(operator, track_mode, detach_z)
    dt = grid.dt
    times = grid.times()

    z = tape.variable(x) if tracked else x
    state_nodes, control_nodes, theta_nodes = [z], [], []
    states = [x.copy()]
    controls, costs = [], []
    objective = 0.0
    previous = None

    for k in range(grid.N):
        t = float(times[k])
        theta_step = tape.variable(theta) if tracked else theta
        theta_nodes.append(theta_step)

        def control_at(s, zs, warm):
            u = stepper.control(theta_step, theta, s, zs, warm)
            if offsets is not None:
                u = u + offsets[k]
            return u

        u = control_at(t, z, previous)
        L = problem.running_cost(t, z, u)
        f = problem.dynamics(t, z, u)
        if grid.integrator == "euler":
            z_next = z + dt * f
            increment = dt * L
        else:
            half = t + 0.5 * dt
            z2 = z + (0.5 * dt) * f
            u2 = control_at(half, z2, u)
            f2, L2 = problem.dynamics(half, z2, u2), problem.running_cost(half, z2, u2)
            z3 = z + (0.5 * dt) * f2
            u3 = control_at(half, z3, u2)
            f3, L3 = problem.dynamics(half, z3, u3), problem.running_cost(half, z3, u3)
            z4 = z + dt * f3
            u4 = control_at(t + dt, z4, u3)
            f4, L4 = problem.dynamics(t + dt, z4, u4), problem.running_cost(t + dt, z4, u4)
            z_next = z + (dt / 6.0) * (f + 2.0 * f2 + 2.0 * f3 + f4)
            increment = (dt / 6.0) * (L + 2.0 * L2 + 2.0 * L3 + L4)

        _check_state(k + 1, z_next)
        objective = objective + increment
        controls.append(np.array(value_of(u), dtype=np.float64))
        costs.append(float(value_of(L)))
        control_nodes.append(u)
        previous = u if track_mode == "unrolled" else value_of(u)
        z = z_next
        state_nodes.append(z)
        states.append(np.array(value_of(z), dtype=np.float64))

    objective = objective + problem.terminal_cost(z)
    if stepper.converged and stepper.converged.count(False):
        logger.debug("%d of %d fixed-point solves hit max_iter", stepper.converged.count(False), len(stepper.converged))

    return Trajectory(
        times=times,
        states=np.array(states),
        controls=np.array(controls).reshape(grid.N, problem.m),
        running_costs=np.array(costs),
        objective=float(value_of(objective)),
        track_mode=track_mode,
        iterations=stepper.iterations,
        converged=stepper.converged,
        tape=tape if tracked else None,
        objective_node=objective if isinstance(objective, Node) else None,
        state_nodes=state_nodes if tracked else [],
        control_nodes=control_nodes if tracked else [],
        theta_nodes=theta_nodes if tracked else [],
    )


def discrete_adjoint(trajectory: Trajectory, scale: float = 1.0) -> Adjoint:
    """One reverse sweep from J: adjoints at the states, dt * h_k at the controls, per-step theta parts.

    Must run while the trajectory's tape is still open. `scale` multiplies
    the seed cotangent (a batch mean passes 1 / batch).
    """
    if trajectory.tape is None or trajectory.objective_node is None:
        raise UntrackedTrajectoryError("discrete adjoint needs a trajectory recorded in a tracked mode")
    tape = trajectory.tape
    targets = [*trajectory.state_nodes, *trajectory.control_nodes, *trajectory.theta_nodes]
    recorded = [t for t in targets if isinstance(t, Node) and t.recorded]
    grads = tape.vjp(trajectory.objective_node, recorded, np.full(trajectory.objective_node.shape, scale))

    def read(nodes, shape):
        out = np.zeros((len(nodes), *shape))
        for i, node in enumerate(nodes):
            if isinstance(node, Node) and node.recorded:
                out[i] = grads[node]
        return out

    n = trajectory.states.shape[1]
    m = trajectory.controls.shape[1]
    p = value_of(trajectory.theta_nodes[0]).size if trajectory.theta_nodes else 0
    result = Adjoint(
        adjoints=read(trajectory.state_nodes, (n,)),
        control_cotangents=read(trajectory.control_nodes, (m,)),
        theta_grads=read(trajectory.theta_nodes, (p,)),
    )
    trajectory.adjoints = result.adjoints
    trajectory.control_cotangents = result.control_cotangents
    return result
