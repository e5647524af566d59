import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from diagnostics import DiagnosticsReport, alignment_report, audit, neighborhood_bound
from grad import (
    MAX_DENSE_CONTROLS,
    BackendError,
    GradientConfig,
    SingularJacobianError,
    batch_objective,
    estimate,
    grad_implicit,
)

from .schedules import Schedule

logger = logging.getLogger(__name__)

# true-gradient logging assembles dense implicit solves; skipped above this
MAX_TRUE_GRAD_PARAMS = 100_000
NEIGHBORHOOD_EPOCH = 50


class NonFiniteDirection(ArithmeticError):
    def __init__(self, j: int | None = None):
        self.j = j
        where = "" if j is None else f" at iteration {j}"
        super().__init__(f"non-finite descent direction{where}")

    def __reduce__(self):
        return type(self), (self.j,)


@dataclass
class StepEstimate:
    loss: float
    direction: np.ndarray
    true_grad: np.ndarray | None = None
    work_units: int = 0
    peak_nodes: int = 0
    nonconverged_rate: float = 0.0


class Objective(Protocol):
    """What the training loop needs from a problem."""

    theta: np.ndarray
    horizon: float

    def set_theta(self, theta) -> None: ...

    def sample_batch(self, rng: np.random.Generator, size: int) -> np.ndarray: ...

    def step(self, theta, batch, with_true_grad: bool = False) -> StepEstimate: ...

    def audit(self, theta, batch, seed: int = 0) -> DiagnosticsReport | None: ...


class ControlObjective:
    """Batch objective of a control problem under a Hamiltonian operator."""

    def __init__(self, operator, grid, grad_cfg: GradientConfig | None = None, config_hash: str = ""):
        self.operator = operator
        self.config_hash = config_hash
        self.problem = operator.problem
        self.net = operator.value_fn
        self.grid = grid
        self.grad_cfg = grad_cfg or GradientConfig()
        self.horizon = grid.T

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta

    def set_theta(self, theta):
        self.net.set_theta(theta)

    @property
    def supports_true_grad(self) -> bool:
        return self.operator.num_controls <= MAX_DENSE_CONTROLS and self.net.num_params <= MAX_TRUE_GRAD_PARAMS

    def sample_batch(self, rng, size):
        return self.problem.sample(rng, size)

    def step(self, theta, batch, with_true_grad=False) -> StepEstimate:
        est = estimate(self.grad_cfg.backend, self.operator, batch, self.grid, self.grad_cfg, theta)
        true = None
        if with_true_grad and self.supports_true_grad:
            if self.grad_cfg.backend == "implicit":
                true = est.direction
            else:
                try:
                    true = grad_implicit(self.operator, batch, self.grid, self.grad_cfg, theta).direction
                except SingularJacobianError as exc:
                    logger.warning("true gradient unavailable: %s", exc)
        return StepEstimate(
            loss=est.loss,
            direction=est.direction,
            true_grad=true,
            work_units=est.work_units,
            peak_nodes=est.peak_nodes,
            nonconverged_rate=est.nonconverged_rate,
        )

    def loss(self, theta, batch) -> float:
        return batch_objective(self.operator, theta, batch, self.grid)

    def audit(self, theta, batch, seed=0) -> DiagnosticsReport:
        return audit(self.operator, batch, self.grid, theta, max_params=MAX_TRUE_GRAD_PARAMS, seed=seed)

    def save(self, path):
        self.net.save(path, self.config_hash)


class QuadraticObjective:
    """f(theta) = 0.5 (theta - c)' H (theta - c) with a biased, noisy gradient oracle.

    The direction is H (theta - c) + bias + noise * mean(batch), batch rows
    being standard normal draws; `true_grad` is the exact H (theta - c).
    """

    horizon = 1.0

    def __init__(self, center, bias=None, noise: float = 0.0, curvature=None, theta0=None):
        self.center = np.asarray(center, dtype=np.float64)
        dim = self.center.size
        self.bias = np.zeros(dim) if bias is None else np.asarray(bias, dtype=np.float64)
        self.noise = float(noise)
        self.H = np.eye(dim) if curvature is None else np.atleast_2d(np.asarray(curvature, dtype=np.float64))
        if self.H.shape != (dim, dim) or self.bias.shape != (dim,):
            raise ValueError(f"curvature must be ({dim}, {dim}) and bias ({dim},)")
        if np.linalg.eigvalsh(0.5 * (self.H + self.H.T)).min() <= 0:
            raise ValueError("curvature must be positive definite")
        self.theta = np.zeros(dim) if theta0 is None else np.array(theta0, dtype=np.float64)

    def set_theta(self, theta):
        self.theta = np.array(theta, dtype=np.float64)

    def sample_batch(self, rng, size):
        return rng.standard_normal((size, self.center.size))

    def loss(self, theta, batch=None) -> float:
        r = np.asarray(theta, dtype=np.float64) - self.center
        return float(0.5 * r @ self.H @ r)

    def step(self, theta, batch, with_true_grad=False) -> StepEstimate:
        grad = self.H @ (np.asarray(theta, dtype=np.float64) - self.center)
        direction = grad + self.bias + self.noise * np.mean(batch, axis=0)
        return StepEstimate(loss=self.loss(theta), direction=direction, true_grad=grad if with_true_grad else None)

    def audit(self, theta, batch, seed=0):
        return None


def sgd_step(params, direction, alpha: float) -> np.ndarray:
    """theta <- theta - alpha * direction; plain SGD, no momentum.

    `params` is an array or an object with `theta` and `set_theta` (updated in place).
    """
    if alpha < 0:
        raise ValueError(f"step size must be non-negative, got {alpha}")
    direction = np.asarray(direction, dtype=np.float64)
    if not np.all(np.isfinite(direction)):
        raise NonFiniteDirection()
    theta = np.asarray(params.theta if hasattr(params, "set_theta") else params, dtype=np.float64)
    if direction.shape != theta.shape:
        raise ValueError(f"direction has shape {direction.shape}, theta has {theta.shape}")
    new = theta - alpha * direction
    if hasattr(params, "set_theta"):
        params.set_theta(new)
    return new


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(16, ge=1)
    epochs: int = Field(10, ge=1)
    iters_per_epoch: int = Field(50, ge=1)
    seed: int = 0
    audit_every: int = Field(0, ge=0)
    checkpoint_every: int = Field(0, ge=0)
    log_true_grad: bool = False
    skip_nonfinite: bool = True
    divergence_factor: float | None = Field(None, gt=1)

    @property
    def iterations(self) -> int:
        return self.epochs * self.iters_per_epoch


@dataclass
class IterationRecord:
    j: int
    epoch: int
    alpha: float
    loss: float
    grad_norm_jfb: float
    grad_norm_true: float | None
    A_K: float
    cesaro_avg: float
    work_units: int = 0
    peak_nodes: int = 0
    lr_events: list[str] = field(default_factory=list)
    audited: bool = False
    # wall clock since the run started; not part of to_rows
    elapsed_ms: float = 0.0


@dataclass
class AuditSnapshot:
    j: int
    report: DiagnosticsReport | None
    epsilon_v: float | None
    loss_delta: float
    descent_bound: float | None
    lipschitz: float | None

    @property
    def descent_ok(self) -> bool | None:
        if self.descent_bound is None:
            return None
        return self.loss_delta <= self.descent_bound


@dataclass
class Incident:
    j: int
    kind: str
    message: str


@dataclass
class TrainHistory:
    records: list[IterationRecord] = field(default_factory=list)
    audits: list[AuditSnapshot] = field(default_factory=list)
    incidents: list[Incident] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    theta: np.ndarray | None = None
    lipschitz_hat: float | None = None
    step_cap: float | None = None
    diverged: bool = False

    @property
    def alphas(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    @property
    def A(self) -> np.ndarray:
        return np.array([r.A_K for r in self.records])

    @property
    def squared_norms(self) -> np.ndarray:
        return np.array([r.grad_norm_jfb for r in self.records]) ** 2

    @property
    def cesaro(self) -> np.ndarray:
        return np.array([r.cesaro_avg for r in self.records])

    def recompute_cesaro(self) -> np.ndarray:
        """(1 / A_K) sum_{j<=K} alpha_j |d_j|^2 straight from the records."""
        alphas = self.alphas
        return np.cumsum(alphas * self.squared_norms) / np.cumsum(alphas)

    @property
    def liminf_proxy(self) -> np.ndarray:
        return np.minimum.accumulate(self.squared_norms)

    def sample_index(self, rng: np.random.Generator) -> int:
        """Iteration j drawn with probability alpha_j / A_K."""
        alphas = self.alphas
        return int(self.records[rng.choice(len(alphas), p=alphas / alphas.sum())].j)

    def true_norms(self) -> np.ndarray:
        return np.array([np.nan if r.grad_norm_true is None else r.grad_norm_true for r in self.records])

    def plateau(self, window: float = 0.2) -> float:
        """Mean squared true-gradient norm over the final `window` of the records."""
        norms = self.true_norms()
        start = int(np.floor(len(norms) * (1.0 - window)))
        tail = norms[min(start, len(norms) - 1):]
        return float(np.nanmean(tail**2)) if np.isfinite(tail).any() else float("nan")

    @property
    def descent_fraction(self) -> float | None:
        checked = [a.descent_ok for a in self.audits if a.descent_ok is not None]
        return sum(checked) / len(checked) if checked else None

    @property
    def epsilon_v_min(self) -> float | None:
        """Smallest epsilon_v over the audits."""
        values = [a.epsilon_v for a in self.audits if a.epsilon_v is not None]
        return min(values) if values else None

    def to_rows(self) -> list[dict]:
        return [
            {
                "j": r.j,
                "epoch": r.epoch,
                "alpha": r.alpha,
                "loss": r.loss,
                "grad_norm_jfb": r.grad_norm_jfb,
                "grad_norm_true": "" if r.grad_norm_true is None else r.grad_norm_true,
                "A_K": r.A_K,
                "cesaro_avg": r.cesaro_avg,
                "work_units": r.work_units,
                "peak_nodes": r.peak_nodes,
                "lr_events": ";".join(r.lr_events),
                "audited": int(r.audited),
            }
            for r in self.records
        ]


def _audit_step(objective, j, alpha, theta, new_theta, batch, est, max_sq_norm, seed):
    """Diagnostics, descent check and Lipschitz secant around one step."""
    report = objective.audit(theta, batch, seed=seed)
    after = objective.step(new_theta, batch, with_true_grad=True)
    delta = after.loss - est.loss
    epsilon_v = bound = lipschitz = None
    if est.true_grad is not None:
        alignment = alignment_report(est.true_grad, est.direction)
        epsilon_v = alignment.epsilon_v
        bound = -alpha * alignment.inner + 0.5 * alpha**2 * max_sq_norm
        moved = np.linalg.norm(new_theta - theta)
        if after.true_grad is not None and moved > 0:
            lipschitz = float(np.linalg.norm(after.true_grad - est.true_grad) / moved)
    return AuditSnapshot(j, report, epsilon_v, delta, bound, lipschitz)


def _check_step_cap(history, snapshot, schedule):
    report = snapshot.report
    if report is None or report.gamma_hat is None or report.gamma_hat >= 1:
        return
    epsilon_v = report.epsilon_v_hat if report.epsilon_v_hat is not None else snapshot.epsilon_v
    if epsilon_v is None or epsilon_v <= 0 or not history.lipschitz_hat:
        return
    history.step_cap = 2.0 * epsilon_v / (history.lipschitz_hat * (1.0 - report.gamma_hat) ** 2)
    if schedule.alpha0 > history.step_cap:
        logger.warning(
            "iteration %d: alpha0 %.4g exceeds the estimated step cap %.4g (L_hat %.4g, gamma_hat %.4g, eps_v %.4g)",
            snapshot.j, schedule.alpha0, history.step_cap, history.lipschitz_hat, report.gamma_hat, epsilon_v,
        )


def train(objective, schedule: Schedule, cfg: TrainConfig | None = None, checkpoint_dir=None,
          nonconverged_warn: float = 0.1, progress: bool = False) -> TrainHistory:
    """Minibatch SGD on `objective` with fresh batches every iteration."""
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    sizer = schedule.start()
    history = TrainHistory()
    theta = np.array(objective.theta, dtype=np.float64)

    A_K = 0.0
    weighted = 0.0
    max_sq_norm = 0.0
    initial_loss = None
    epoch_losses = []
    started = time.perf_counter()

    logger.info(
        "training %d iterations (%d epochs of %d), batch %d, %s schedule alpha0=%.4g",
        cfg.iterations, cfg.epochs, cfg.iters_per_epoch, cfg.batch_size, schedule.kind, schedule.alpha0,
    )
    for j in tqdm(range(cfg.iterations), desc="train", disable=not progress):
        epoch = j // cfg.iters_per_epoch
        batch = objective.sample_batch(rng, cfg.batch_size)
        alpha = sizer.alpha(j)
        audited = cfg.audit_every > 0 and j % cfg.audit_every == 0
        est = objective.step(theta, batch, with_true_grad=cfg.log_true_grad or audited)

        if est.nonconverged_rate > nonconverged_warn:
            logger.warning("iteration %d: %.1f%% of fixed-point solves hit max_iter", j, 100 * est.nonconverged_rate)
        if initial_loss is None:
            initial_loss = est.loss

        try:
            new_theta = sgd_step(theta, est.direction, alpha)
            if not np.isfinite(est.loss):
                raise NonFiniteDirection(j)
        except NonFiniteDirection:
            if not cfg.skip_nonfinite:
                raise NonFiniteDirection(j) from None
            logger.warning("iteration %d: non-finite direction or loss, step skipped", j)
            history.incidents.append(Incident(j, "nonfinite", "non-finite direction or loss; step skipped"))
        else:
            sq_norm = float(est.direction @ est.direction)
            max_sq_norm = max(max_sq_norm, sq_norm)
            A_K += alpha
            weighted += alpha * sq_norm
            history.records.append(IterationRecord(
                j=j,
                epoch=epoch,
                alpha=alpha,
                loss=est.loss,
                grad_norm_jfb=float(np.sqrt(sq_norm)),
                grad_norm_true=None if est.true_grad is None else float(np.linalg.norm(est.true_grad)),
                A_K=A_K,
                cesaro_avg=weighted / A_K,
                work_units=est.work_units,
                peak_nodes=est.peak_nodes,
                audited=audited,
                elapsed_ms=1000.0 * (time.perf_counter() - started),
            ))
            if audited:
                snapshot = _audit_step(objective, j, alpha, theta, new_theta, batch, est, max_sq_norm, cfg.seed + j)
                history.audits.append(snapshot)
                if snapshot.lipschitz is not None:
                    history.lipschitz_hat = max(history.lipschitz_hat or 0.0, snapshot.lipschitz)
                _check_step_cap(history, snapshot, schedule)

            theta = new_theta
            objective.set_theta(theta)
            epoch_losses.append(est.loss)

            if cfg.checkpoint_every and checkpoint_dir is not None and (j + 1) % cfg.checkpoint_every == 0:
                save = getattr(objective, "save", None)
                if save is not None:
                    path = Path(checkpoint_dir) / f"theta_{j + 1:06d}.ckpt"
                    save(path)
                    history.checkpoints.append(path)

        if (j + 1) % cfg.iters_per_epoch == 0 and epoch_losses:
            mean_loss = float(np.mean(epoch_losses))
            epoch_losses = []
            event = sizer.end_epoch(epoch, mean_loss)
            last = history.records[-1]
            if event is not None:
                last.lr_events.append(event)
            logger.info("epoch %d: mean loss %.6g, alpha %.4g, cesaro %.4e", epoch, mean_loss, alpha, last.cesaro_avg)
            if cfg.divergence_factor is not None and mean_loss > cfg.divergence_factor * abs(initial_loss):
                logger.warning("epoch %d: mean loss %.6g exceeds %g x initial %.6g, stopping", epoch, mean_loss,
                               cfg.divergence_factor, initial_loss)
                history.diverged = True
                break

    history.theta = theta
    return history


@dataclass
class NeighborhoodRow:
    alpha: float
    plateau: float
    final_loss: float
    iterations: int
    diverged: bool
    bound: float | None = None


def neighborhood_experiment(objective, alphas, iterations: int, batch_size: int = 16, seed: int = 0,
                            window: float = 0.2, divergence_factor: float = 10.0,
                            audit_every: int = 0) -> list[NeighborhoodRow]:
    """Constant-step runs from the same start and seed, one per alpha (descending).

    The plateau of each run is the mean squared true-gradient norm over the
    final `window` of its iterations.
    """
    alphas = [float(a) for a in alphas]
    if not alphas or any(a <= 0 for a in alphas):
        raise ValueError("alphas must be a non-empty list of positive step sizes")
    if any(a < b for a, b in zip(alphas, alphas[1:])):
        raise ValueError(f"alphas must be sorted in descending order, got {alphas}")
    if iterations < 1:
        raise ValueError(f"iterations must be at least 1, got {iterations}")

    # divergence is judged on epoch-mean losses
    epochs, rest = divmod(iterations, NEIGHBORHOOD_EPOCH)
    if epochs == 0 or rest:
        epochs, per_epoch = 1, iterations
    else:
        per_epoch = NEIGHBORHOOD_EPOCH

    theta0 = np.array(objective.theta, dtype=np.float64)
    rows = []
    for alpha in alphas:
        objective.set_theta(theta0)
        cfg = TrainConfig(
            batch_size=batch_size, epochs=epochs, iters_per_epoch=per_epoch, seed=seed, log_true_grad=True,
            skip_nonfinite=False, divergence_factor=divergence_factor, audit_every=audit_every,
        )
        try:
            history = train(objective, Schedule(kind="constant", alpha0=alpha), cfg)
        except (NonFiniteDirection, BackendError) as exc:
            logger.warning("alpha %.4g diverged: %s", alpha, exc)
            rows.append(NeighborhoodRow(alpha, float("nan"), float("nan"), 0, True))
            continue

        diverged = history.diverged or not history.records
        final_loss = history.records[-1].loss if history.records else float("nan")
        rows.append(NeighborhoodRow(
            alpha=alpha,
            plateau=float("nan") if diverged else history.plateau(window),
            final_loss=final_loss,
            iterations=len(history.records),
            diverged=diverged,
            bound=None if diverged else _predicted_bound(history, alpha, objective.horizon),
        ))
        logger.info("alpha %.4g: plateau %.4e%s", alpha, rows[-1].plateau, " (diverged)" if diverged else "")
    objective.set_theta(theta0)
    return rows


def _predicted_bound(history, alpha, horizon) -> float | None:
    reports = [a.report for a in history.audits if a.report is not None]
    if not reports:
        return None
    last = reports[-1]
    return neighborhood_bound(
        alpha, history.lipschitz_hat, last.B_max_hat, horizon, last.beta_hat, last.epsilon_v_hat, last.epsilon1_hat,
    )


def plateaus_monotone(rows: list[NeighborhoodRow]) -> bool:
    """Plateaus of the non-divergent runs are nonincreasing as alpha decreases."""
    plateaus = [r.plateau for r in rows if not r.diverged]
    return all(b <= a for a, b in zip(plateaus, plateaus[1:]))
