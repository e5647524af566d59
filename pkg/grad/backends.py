import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field

from hamiltonian import FixedPointDivergence, vjp_theta
from problems import DomainError
from rollout import Grid, RolloutError, discrete_adjoint, rollout
from tape import NonFiniteError, Tape

logger = logging.getLogger(__name__)

BACKEND_CHOICES = [
    ("jfb", "Jacobian-free: one tracked T application per step"),
    ("implicit", "Exact implicit differentiation through I - dT/du"),
    ("unrolled", "Backpropagation through every inner iteration"),
    ("finite_diff", "Central differences of the batch objective"),
]

# dense m x m Jacobian solves per step are only assembled below this size
MAX_DENSE_CONTROLS = 64

_SAMPLE_ERRORS = (RolloutError, FixedPointDivergence, DomainError, NonFiniteError)


class BackendError(RuntimeError):
    def __init__(self, message: str, sample: int | None = None, cause_type: str | None = None):
        super().__init__(message, sample, cause_type)
        self.message = message
        self.sample = sample
        self.cause_type = cause_type

    def __str__(self):
        if self.sample is None:
            return self.message
        return f"sample {self.sample}: {self.message}"


class GradientConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    backend: Literal["jfb", "implicit", "unrolled", "finite_diff"] = "jfb"
    detach_z: bool = False
    node_budget: int | None = Field(None, ge=1)
    n_jobs: int = Field(1, ge=1)
    keep_steps: bool = False
    fd_step: float = Field(1e-6, gt=0)


@dataclass
class SampleGradient:
    gradient: np.ndarray
    loss: float
    work_units: int
    peak_nodes: int
    h: np.ndarray                    # (N, m) per-step h_k
    v: np.ndarray | None = None      # (N, p)
    w: np.ndarray | None = None      # (N, p)
    solves: int = 0
    nonconverged: int = 0
    inner_iterations: int = 0


@dataclass
class GradientEstimate:
    """Batch-mean descent direction with its cost accounting."""

    direction: np.ndarray
    backend: str
    work_units: int
    peak_nodes: int
    loss: float
    per_sample: np.ndarray | None = None
    per_step_h: np.ndarray | None = None    # (B, N, m)
    per_step_v: np.ndarray | None = None    # (B, N, p)
    per_step_w: np.ndarray | None = None    # (B, N, p)
    solves: int = 0
    nonconverged: int = 0
    inner_iterations: int = 0
    coords: np.ndarray | None = None

    @property
    def batch_size(self) -> int:
        return 0 if self.per_sample is None else len(self.per_sample)

    @property
    def nonconverged_rate(self) -> float:
        return self.nonconverged / self.solves if self.solves else 0.0

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.direction))


def sample_gradient(operator, theta, x, grid: Grid, cfg: GradientConfig, index: int = 0) -> SampleGradient:
    """Rollout plus one reverse sweep for a single initial state."""
    backend = cfg.backend
    try:
        with Tape(node_budget=cfg.node_budget) as tape:
            traj = rollout(operator, theta, x, grid, track_mode=backend, detach_z=cfg.detach_z)
            adjoint = discrete_adjoint(traj)
            work = tape.stats.vjp_count
            peak = tape.stats.peak_node_count
    except _SAMPLE_ERRORS as exc:
        raise BackendError(str(exc), index, type(exc).__name__) from exc

    dt = grid.dt
    h = adjoint.control_cotangents / dt
    per_step = adjoint.theta_grads / dt
    v = w = None
    if backend == "implicit":
        # m basis sweeps per solve to assemble dT/du
        work += traj.solves * operator.num_controls
        if cfg.keep_steps:
            v = per_step
            w = np.array([
                vjp_theta(operator, theta, float(traj.times[k]), traj.states[k], traj.controls[k], h[k])
                for k in range(grid.N)
            ])
    elif cfg.keep_steps:
        if backend == "jfb":
            w = per_step
        else:
            v = per_step

    return SampleGradient(
        gradient=adjoint.gradient,
        loss=traj.objective,
        work_units=int(work),
        peak_nodes=int(peak),
        h=h,
        v=v,
        w=w,
        solves=traj.solves,
        nonconverged=traj.nonconverged,
        inner_iterations=traj.inner_iterations,
    )


def _map_samples(fn, batch, n_jobs: int) -> list:
    if n_jobs > 1 and len(batch) > 1:
        return Parallel(n_jobs=n_jobs, backend="loky")(delayed(fn)(i, x) for i, x in enumerate(batch))
    return [fn(i, x) for i, x in enumerate(batch)]


def _check_batch(operator, batch) -> np.ndarray:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise BackendError("empty batch")
    if batch.shape[1] != operator.problem.n:
        raise BackendError(f"batch states have dimension {batch.shape[1]}, problem has n={operator.problem.n}")
    return batch


def _reduce(samples: list[SampleGradient], backend: str) -> GradientEstimate:
    per_sample = np.array([s.gradient for s in samples])

    def stacked(name):
        items = [getattr(s, name) for s in samples]
        return None if items[0] is None else np.array(items)

    return GradientEstimate(
        direction=per_sample.mean(axis=0),
        backend=backend,
        work_units=sum(s.work_units for s in samples),
        peak_nodes=max(s.peak_nodes for s in samples),
        loss=float(np.mean([s.loss for s in samples])),
        per_sample=per_sample,
        per_step_h=stacked("h"),
        per_step_v=stacked("v"),
        per_step_w=stacked("w"),
        solves=sum(s.solves for s in samples),
        nonconverged=sum(s.nonconverged for s in samples),
        inner_iterations=sum(s.inner_iterations for s in samples),
    )


def _backend_gradient(backend, operator, batch, grid, cfg, theta):
    cfg = (cfg or GradientConfig()).model_copy(update={"backend": backend})
    if cfg.keep_steps and grid.integrator != "euler":
        # RK4 mixes four stage controls into one step; h_k and w_k are Euler quantities
        raise ValueError(f"per-step integrands need an euler grid, got integrator={grid.integrator!r}")
    theta = operator.value_fn.theta if theta is None else np.asarray(theta, dtype=np.float64)
    batch = _check_batch(operator, batch)

    def one(index, x):
        return sample_gradient(operator, theta, x, grid, cfg, index)

    estimate = _reduce(_map_samples(one, batch, cfg.n_jobs), backend)
    logger.debug(
        "%s gradient over %d samples: loss %.6g, |d| %.3e, %d work units, peak %d nodes",
        backend, len(batch), estimate.loss, estimate.norm, estimate.work_units, estimate.peak_nodes,
    )
    return estimate


def grad_jfb(operator, batch, grid: Grid, cfg: GradientConfig | None = None, theta=None) -> GradientEstimate:
    return _backend_gradient("jfb", operator, batch, grid, cfg, theta)


def grad_implicit(operator, batch, grid: Grid, cfg: GradientConfig | None = None, theta=None) -> GradientEstimate:
    if operator.num_controls > MAX_DENSE_CONTROLS:
        raise BackendError(
            f"implicit backend solves dense {operator.num_controls}x{operator.num_controls} systems; "
            f"the limit is m <= {MAX_DENSE_CONTROLS}"
        )
    return _backend_gradient("implicit", operator, batch, grid, cfg, theta)


def grad_unrolled(operator, batch, grid: Grid, cfg: GradientConfig | None = None, theta=None) -> GradientEstimate:
    return _backend_gradient("unrolled", operator, batch, grid, cfg, theta)


def batch_objective(operator, theta, batch, grid: Grid) -> float:
    batch = _check_batch(operator, batch)
    return float(np.mean([rollout(operator, theta, x, grid).objective for x in batch]))


def central_differences(fn, theta, coords, step: float = 1e-6) -> np.ndarray:
    """(fn(theta + s e_i) - fn(theta - s e_i)) / 2s for every i in coords."""
    theta = np.asarray(theta, dtype=np.float64)
    values = np.empty(len(coords))
    for j, i in enumerate(coords):
        e = np.zeros_like(theta)
        e[i] = step
        values[j] = (fn(theta + e) - fn(theta - e)) / (2.0 * step)
    return values


def finite_diff_grad(operator, batch, grid: Grid, coords=None, step: float = 1e-6, theta=None) -> GradientEstimate:
    """Central differences of the batch objective at the requested coordinates; zero elsewhere."""
    theta = operator.value_fn.theta if theta is None else np.asarray(theta, dtype=np.float64)
    batch = _check_batch(operator, batch)
    coords = np.arange(theta.size) if coords is None else np.asarray(coords, dtype=int)
    if coords.size and (coords.min() < 0 or coords.max() >= theta.size):
        raise BackendError(f"coordinates must lie in [0, {theta.size})")

    values = central_differences(lambda th: batch_objective(operator, th, batch, grid), theta, coords, step)
    direction = np.zeros(theta.size)
    direction[coords] = values
    return GradientEstimate(
        direction=direction,
        backend="finite_diff",
        work_units=0,
        peak_nodes=0,
        loss=batch_objective(operator, theta, batch, grid),
        coords=coords,
    )


def estimate(backend: str, operator, batch, grid: Grid, cfg: GradientConfig | None = None, theta=None,
             coords=None) -> GradientEstimate:
    if backend == "jfb":
        return grad_jfb(operator, batch, grid, cfg, theta)
    if backend == "implicit":
        return grad_implicit(operator, batch, grid, cfg, theta)
    if backend == "unrolled":
        return grad_unrolled(operator, batch, grid, cfg, theta)
    if backend == "finite_diff":
        step = cfg.fd_step if cfg is not None else 1e-6
        return finite_diff_grad(operator, batch, grid, coords, step, theta)
    raise BackendError(f"unknown backend {backend!r}; expected one of {[c for c, _ in BACKEND_CHOICES]}")
