import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from diagnostics import DiagnosticsReport, audit
from grad import GradientConfig, batch_objective
from hamiltonian import HamiltonianOperator
from problems import make_problem, params_model
from rollout import discrete_adjoint, rollout
from tape import NodeBudgetExceeded, Tape
from trainer import ControlObjective, neighborhood_experiment, plateaus_monotone, train
from valuenet import ValueNetwork

from .artifacts import ArtifactWriter
from .config import CompareBlock, ConfigError, DiagnoseBlock, ExperimentConfig, NeighborhoodBlock, OracleBlock

logger = logging.getLogger(__name__)


@dataclass
class RuntimeOptions:
    """Process-level knobs; the management commands fill these from settings."""

    node_budget: int | None = None
    n_jobs: int = 1
    nonconverged_warn: float = 0.1
    progress: bool = False


@dataclass
class Components:
    problem: object
    net: ValueNetwork
    operator: HamiltonianOperator


def build(config: ExperimentConfig, net: ValueNetwork | None = None) -> Components:
    params = params_model(config.problem.name).model_validate(config.problem.params)
    problem = make_problem(config.problem.name, config.problem.agents, params, config.problem.horizon)
    if net is None:
        net = ValueNetwork(problem.n, config.net.widths, config.net.seed)
    operator = HamiltonianOperator(problem, net, config.operator.operator_config())
    return Components(problem, net, operator)


def gradient_config(config: ExperimentConfig, runtime: RuntimeOptions, backend: str | None = None) -> GradientConfig:
    return GradientConfig(
        backend=backend or config.train.backend,
        detach_z=config.operator.detach_z,
        node_budget=runtime.node_budget,
        n_jobs=runtime.n_jobs,
    )


def _blank(value):
    return "" if value is None else value


def audit_rows(history) -> list[dict]:
    epochs = {r.j: r.epoch for r in history.records}
    rows = []
    for snapshot in history.audits:
        row = {
            "j": snapshot.j,
            "epoch": epochs.get(snapshot.j, ""),
            "epsilon_v": _blank(snapshot.epsilon_v),
            "loss_delta": snapshot.loss_delta,
            "descent_bound": _blank(snapshot.descent_bound),
            "descent_ok": _blank(snapshot.descent_ok),
            "lipschitz": _blank(snapshot.lipschitz),
        }
        if snapshot.report is not None:
            report = snapshot.report.model_dump()
            row["not_estimated"] = ";".join(report.pop("not_estimated"))
            row.update({key: _blank(value) for key, value in report.items()})
        rows.append(row)
    return rows


def traced_trajectory(operator, theta, x, grid, node_budget=None):
    """Closed-loop trajectory with adjoints filled in."""
    with Tape(node_budget=node_budget):
        trajectory = rollout(operator, theta, x, grid, track_mode="jfb")
        discrete_adjoint(trajectory)
    return trajectory


def _train(config, runtime, parts, checkpoint_dir=None):
    objective = ControlObjective(parts.operator, config.grid, gradient_config(config, runtime), config.config_hash)
    return train(
        objective,
        config.train.schedule,
        config.train.train_config(config.seed),
        checkpoint_dir=checkpoint_dir,
        nonconverged_warn=runtime.nonconverged_warn,
        progress=runtime.progress,
    )


def run_train(config: ExperimentConfig, out_dir, runtime: RuntimeOptions):
    parts = build(config)
    writer = ArtifactWriter(out_dir, "train", config)
    checkpoint_dir = Path(out_dir) / "checkpoints" if config.train.checkpoint_every else None
    history = _train(config, runtime, parts, checkpoint_dir)

    rows = history.to_rows()
    if "csv" in config.output.formats:
        writer.csv("history", rows, "history")
    if "json" in config.output.formats:
        writer.json("history", {"records": rows, "incidents": [asdict(i) for i in history.incidents]}, "history")
    if history.audits:
        writer.csv("diagnostics", audit_rows(history), "diagnostics")
    for path in history.checkpoints:
        writer.file(path.stem, path, "checkpoint")
    final = Path(out_dir) / "theta_final.ckpt"
    parts.net.save(final, config.config_hash)
    writer.file("theta_final", final, "checkpoint")

    if config.output.trajectory:
        x = parts.problem.sample_states(config.seed, 1)[0]
        trajectory = traced_trajectory(parts.operator, parts.net.theta, x, config.grid, runtime.node_budget)
        writer.csv("trajectory", trajectory.to_rows(), "trajectory")

    last = history.records[-1] if history.records else None
    writer.finish(
        iterations=len(history.records),
        problem=parts.problem.describe(),
        final_loss=None if last is None else last.loss,
        final_cesaro=None if last is None else last.cesaro_avg,
        skipped_steps=len(history.incidents),
        descent_fraction=history.descent_fraction,
        epsilon_v_hat_min=history.epsilon_v_min,
        lipschitz_hat=history.lipschitz_hat,
        step_cap=history.step_cap,
    )
    return history, writer


def _epoch_rows(backend, history):
    rows = []
    cumulative = 0
    epochs = sorted({r.epoch for r in history.records})
    for epoch in epochs:
        records = [r for r in history.records if r.epoch == epoch]
        cumulative += sum(r.work_units for r in records)
        rows.append({
            "backend": backend,
            "epoch": epoch + 1,
            "loss": float(np.mean([r.loss for r in records])),
            "cum_work_units": cumulative,
            "peak_nodes": max(r.peak_nodes for r in records),
            "wall_ms": round(records[-1].elapsed_ms, 3),
            "feasible": 1,
        })
    return rows


def run_compare(config: ExperimentConfig, out_dir, runtime: RuntimeOptions):
    block = config.compare or CompareBlock()
    epochs = block.epochs or config.train.epochs
    writer = ArtifactWriter(out_dir, "compare", config)
    train_cfg = config.train.train_config(config.seed).model_copy(
        update={"epochs": epochs, "audit_every": 0, "checkpoint_every": 0}
    )

    rows = []
    summary = {}
    for backend in block.backends:
        parts = build(config)
        holdout = parts.problem.sample_states(block.holdout_seed, block.holdout)
        objective = ControlObjective(parts.operator, config.grid, gradient_config(config, runtime, backend))
        try:
            history = train(objective, config.train.schedule, train_cfg, nonconverged_warn=runtime.nonconverged_warn,
                            progress=runtime.progress)
        except NodeBudgetExceeded as exc:
            logger.warning("%s backend infeasible: %s", backend, exc)
            rows.append({"backend": backend, "epoch": "", "feasible": 0})
            summary[backend] = {"feasible": False, "reason": str(exc)}
            continue
        backend_rows = _epoch_rows(backend, history)
        rows.extend(backend_rows)
        summary[backend] = {
            "feasible": True,
            "final_objective": batch_objective(parts.operator, history.theta, holdout, config.grid),
            "cum_work_units": backend_rows[-1]["cum_work_units"] if backend_rows else 0,
            "peak_nodes": max((r["peak_nodes"] for r in backend_rows), default=0),
        }
        logger.info("%s: final holdout objective %.6g", backend, summary[backend]["final_objective"])

    fields = ["backend", "epoch", "loss", "cum_work_units", "peak_nodes", "wall_ms", "feasible"]
    writer.csv("compare", rows, "compare", fieldnames=fields)
    writer.finish(backends=summary)
    return rows, summary, writer


def run_diagnose(config: ExperimentConfig, out_dir, runtime: RuntimeOptions, checkpoint=None) -> DiagnosticsReport:
    block = config.diagnose or DiagnoseBlock()
    checkpoint = checkpoint or block.checkpoint
    parts = build(config)
    if checkpoint:
        # shape or config-hash mismatches surface as NetworkShapeError or CheckpointError
        parts = build(config, ValueNetwork.load(checkpoint, n_state=parts.problem.n, config_hash=config.config_hash))

    batch = parts.problem.sample_states(block.seed, block.batch)
    report = audit(parts.operator, batch, config.grid, power_iters=block.power_iters, seed=config.seed)
    writer = ArtifactWriter(out_dir, "diagnose", config)
    writer.json("diagnostics", report, "diagnostics")
    writer.json("diagnostics_schema", DiagnosticsReport.model_json_schema(), "schema")
    writer.finish(
        checkpoint=None if not checkpoint else str(checkpoint),
        problem=parts.problem.describe(),
        pass_A1=report.pass_A1,
        pass_A3=report.pass_A3,
        pass_A4=report.pass_A4,
    )
    return report


def relative_gap(objective: float, optimal: float) -> float:
    if optimal == 0:
        return 0.0 if objective == 0 else float("inf")
    return (objective - optimal) / abs(optimal)


def run_oracle(config: ExperimentConfig, out_dir, runtime: RuntimeOptions):
    if config.problem.name != "lqr":
        raise ConfigError("problem.name", "the oracle compares against the Riccati solution and needs 'lqr'")
    block = config.oracle or OracleBlock()
    parts = build(config)
    problem, grid = parts.problem, config.grid
    holdout = problem.sample_states(block.holdout_seed, block.holdout)
    solution = problem.riccati(grid.N)
    optimal = float(np.mean([solution.cost(x) for x in holdout]))

    preset = HamiltonianOperator(problem, problem.optimal_value(grid.N), parts.operator.cfg)
    controllers = [
        ("riccati_preset", preset, np.zeros(0)),
        ("untrained", parts.operator, parts.net.theta.copy()),
    ]
    if block.train:
        history = _train(config, runtime, parts)
        controllers.append(("trained", parts.operator, history.theta))

    rows = []
    for name, operator, theta in controllers:
        objective = batch_objective(operator, theta, holdout, grid)
        rows.append({"controller": name, "objective": objective, "optimal": optimal,
                     "gap": relative_gap(objective, optimal)})
        logger.info("%s: objective %.6g vs optimal %.6g (gap %.3e)", name, objective, optimal, rows[-1]["gap"])

    writer = ArtifactWriter(out_dir, "oracle", config)
    writer.csv("oracle", rows, "oracle")
    writer.finish(optimal=optimal, gaps={row["controller"]: row["gap"] for row in rows})
    return rows, writer


def run_neighborhood(config: ExperimentConfig, out_dir, runtime: RuntimeOptions):
    block = config.neighborhood or NeighborhoodBlock()
    parts = build(config)
    objective = ControlObjective(parts.operator, config.grid, gradient_config(config, runtime))
    rows = neighborhood_experiment(
        objective,
        block.alphas,
        block.iterations,
        batch_size=config.train.batch_size,
        seed=config.seed,
        window=block.window,
        divergence_factor=block.divergence_factor,
        audit_every=config.train.audit_every,
    )
    writer = ArtifactWriter(out_dir, "neighborhood", config)
    writer.csv("neighborhood", [{k: _blank(v) for k, v in asdict(r).items()} for r in rows], "neighborhood")
    monotone = plateaus_monotone(rows)
    writer.finish(monotone=monotone, diverged=[r.alpha for r in rows if r.diverged])
    return rows, monotone, writer
