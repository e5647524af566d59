"""Empirical audits of the convergence assumptions for one frozen theta.

Every quantity here is an estimate from sampled states; nothing is a
certified bound. Quantities that cannot be identified from a finite run are
listed in `DiagnosticsReport.not_estimated`.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from grad import MAX_DENSE_CONTROLS, GradientConfig, grad_implicit, grad_jfb
from hamiltonian import jacobian_u, jvp_theta_fd, theta_rows
from rollout import Grid, rollout
from tape import value_of

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
HJB_STEP = 1e-5
UNIDENTIFIABLE = ["L_J", "J_inf", "a_v", "a_w", "delta_v", "delta_w"]


class AuditError(ValueError):
    pass


@dataclass
class SamplePoints:
    """Closed-loop (t_k, z_k, u_k) for every sample and step."""

    times: np.ndarray      # (N,)
    states: np.ndarray     # (B, N, n)
    controls: np.ndarray   # (B, N, m)

    def flat(self):
        for b in range(self.states.shape[0]):
            for k, t in enumerate(self.times):
                yield float(t), self.states[b, k], self.controls[b, k]


def collect_points(operator, theta, batch, grid: Grid) -> SamplePoints:
    trajectories = [rollout(operator, theta, x, grid) for x in np.atleast_2d(batch)]
    return SamplePoints(
        times=trajectories[0].times[:-1],
        states=np.array([tr.states[:-1] for tr in trajectories]),
        controls=np.array([tr.controls for tr in trajectories]),
    )


@dataclass
class ContractionEstimate:
    gamma_hat: float
    uncertainty: float
    per_point: np.ndarray

    @property
    def contractive(self) -> bool:
        return self.gamma_hat < 1.0


def _power_sigma(J: np.ndarray, iters: int, rng) -> tuple[float, float]:
    """Largest singular value by power iteration on J'J, with the last change as uncertainty."""
    if J.size == 0:
        return 0.0, 0.0
    x = rng.normal(size=J.shape[1])
    x /= np.linalg.norm(x)
    estimate = previous = 0.0
    for _ in range(iters):
        Jx = J @ x
        previous, estimate = estimate, float(np.linalg.norm(Jx))
        y = J.T @ Jx
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0, 0.0
        x = y / norm
    return estimate, abs(estimate - previous)


def estimate_contraction(operator, points, iters: int = 100, theta=None, seed: int = 0) -> ContractionEstimate:
    """Worst-case sigma_max(dT/du) over sampled (t, z, u)."""
    if iters < 10:
        raise AuditError(f"power iteration needs at least 10 iterations, got {iters}")
    theta = _theta(operator, theta)
    rng = np.random.default_rng(seed)
    sigmas, spreads = [], []
    for t, z, u in _iter_points(points):
        sigma, spread = _power_sigma(jacobian_u(operator, theta, t, z, u), iters, rng)
        sigmas.append(sigma)
        spreads.append(spread)
    if not sigmas:
        raise AuditError("no sample points to audit")
    sigmas = np.array(sigmas)
    worst = int(np.argmax(sigmas))
    return ContractionEstimate(gamma_hat=float(sigmas[worst]), uncertainty=float(spreads[worst]), per_point=sigmas)


@dataclass
class SpectrumEstimate:
    sigma_min: float
    sigma_max: float
    lambda_minus: float
    lambda_plus: float
    kappa_hat: float | None
    full_rank: bool


def m_theta_spectrum(operator, points, theta=None, rank_tol: float = RANK_TOL, block: int | None = None) -> SpectrumEstimate:
    """Extreme eigenvalues of M M' over the sampled points, M = dT/dtheta.

    With `block` set, M M' is split into diagonal blocks of that size (one
    per agent) and each block is audited on its own.
    """
    theta = _theta(operator, theta)
    m = operator.num_controls
    block = block or m
    if block > MAX_DENSE_CONTROLS:
        raise AuditError(f"spectrum blocks of size {block} exceed {MAX_DENSE_CONTROLS}; audit per agent")
    if m % block:
        raise AuditError(f"block size {block} does not divide m={m}")

    lam_min, lam_max, kappa = np.inf, 0.0, 1.0
    for t, z, u in _iter_points(points):
        M = theta_rows(operator, theta, t, z, u)
        for start in range(0, m, block):
            rows = M[start:start + block]
            eig = np.linalg.eigvalsh(rows @ rows.T)
            lo, hi = float(eig[0]), float(eig[-1])
            lam_min, lam_max = min(lam_min, lo), max(lam_max, hi)
            if lo > rank_tol:
                kappa = max(kappa, hi / lo)
    if lam_min == np.inf:
        raise AuditError("no sample points to audit")

    full_rank = lam_min > rank_tol
    return SpectrumEstimate(
        sigma_min=math.sqrt(max(lam_min, 0.0)),
        sigma_max=math.sqrt(lam_max),
        lambda_minus=lam_min,
        lambda_plus=lam_max,
        kappa_hat=kappa if full_rank else None,
        full_rank=full_rank,
    )


@dataclass
class Alignment:
    angle: float | None
    inner: float
    epsilon_v: float | None

    @property
    def descent(self) -> bool | None:
        return None if self.angle is None else self.angle < math.pi / 2


def alignment_report(true_grad, jfb_direction) -> Alignment:
    """Angle and inner product between the batch-mean true gradient and JFB direction."""
    g = np.asarray(getattr(true_grad, "direction", true_grad), dtype=np.float64)
    d = np.asarray(getattr(jfb_direction, "direction", jfb_direction), dtype=np.float64)
    inner = float(g @ d)
    g_norm, d_norm = np.linalg.norm(g), np.linalg.norm(d)
    if g_norm == 0.0 or d_norm == 0.0:
        return Alignment(angle=None, inner=inner, epsilon_v=None)
    cos = float(np.clip(inner / (g_norm * d_norm), -1.0, 1.0))
    return Alignment(angle=math.acos(cos), inner=inner, epsilon_v=inner / g_norm**2)


@dataclass
class VarianceAudit:
    delta_var_hat: float
    delta_var_unsquared: float
    var_v: np.ndarray          # (N,)
    var_w: np.ndarray          # (N,)
    mean_mv_sq: np.ndarray     # ||E[M v_k]||^2 per step
    inner_vw: np.ndarray       # <E v_k, E w_k> per step
    B_max_hat: float | None

    @property
    def max_var(self) -> np.ndarray:
        return np.maximum(self.var_v, self.var_w)


def _population_variance(x: np.ndarray) -> np.ndarray:
    """E||x - E x||^2 across the batch axis, per step."""
    centered = x - x.mean(axis=0, keepdims=True)
    return (centered**2).sum(axis=2).mean(axis=0)


def variance_audit(v, w, mv, h=None) -> VarianceAudit:
    """Per-step batch variances of v and w against ||E[M v]||^2.

    `v`, `w` have shape (B, N, p); `mv` holds M v per sample and step, (B, N, m).
    """
    v, w, mv = (np.asarray(a, dtype=np.float64) for a in (v, w, mv))
    if v.shape[0] < 2:
        raise AuditError("variance needs a batch of at least two samples")
    if v.shape != w.shape or mv.shape[:2] != v.shape[:2]:
        raise AuditError(f"mismatched integrand shapes v{v.shape} w{w.shape} Mv{mv.shape}")

    var_v, var_w = _population_variance(v), _population_variance(w)
    mean_mv_sq = (mv.mean(axis=0) ** 2).sum(axis=1)
    worst = np.maximum(var_v, var_w)
    with np.errstate(divide="ignore", invalid="ignore"):
        squared = np.where(worst == 0.0, 0.0, worst**2 / mean_mv_sq)
        unsquared = np.where(worst == 0.0, 0.0, worst / np.sqrt(mean_mv_sq))
    inner = np.einsum("kp,kp->k", v.mean(axis=0), w.mean(axis=0))
    B_max = None if h is None else float(np.linalg.norm(np.asarray(h), axis=-1).max())
    return VarianceAudit(
        delta_var_hat=float(squared.max()),
        delta_var_unsquared=float(unsquared.max()),
        var_v=var_v,
        var_w=var_w,
        mean_mv_sq=mean_mv_sq,
        inner_vw=inner,
        B_max_hat=B_max,
    )


def m_theta_v(operator, theta, points: SamplePoints, v) -> np.ndarray:
    """M v per sample and step by directional finite differences, (B, N, m)."""
    theta = _theta(operator, theta)
    v = np.asarray(v, dtype=np.float64)
    B, N = v.shape[:2]
    out = np.zeros((B, N, operator.num_controls))
    for b in range(B):
        for k in range(N):
            out[b, k] = jvp_theta_fd(operator, theta, float(points.times[k]), points.states[b, k],
                                     points.controls[b, k], v[b, k])
    return out


def hjb_residual_max(operator, points, theta=None, step: float = HJB_STEP) -> float:
    """Largest |d/dt phi - H| over the sampled closed-loop points."""
    theta = _theta(operator, theta)
    return max((abs(operator.hjb_residual(theta, t, z, u, step)) for t, z, u in _iter_points(points)), default=0.0)


def epsilon1_hat(variance: VarianceAudit, gamma_hat: float, lambda_minus: float, lambda_plus: float) -> float | None:
    """Smallest eps1 >= 0 with max(Var)^2 <= eps1 + delta_ref ||E[M v]||^2 at every step."""
    delta_ref = 0.5 * (lambda_minus - gamma_hat * lambda_plus)
    if delta_ref <= 0:
        return None
    slack = variance.max_var**2 - delta_ref * variance.mean_mv_sq
    return float(max(0.0, slack.max()))


def neighborhood_bound(alpha, lipschitz, B_max, T, beta, epsilon_v, epsilon1) -> float | None:
    """alpha L B^2 T^2 / (2 beta eps_v) + T^2 eps1 / eps_v; None if an ingredient is missing."""
    parts = (alpha, lipschitz, B_max, T, beta, epsilon_v, epsilon1)
    if any(p is None for p in parts) or epsilon_v <= 0 or beta <= 0:
        return None
    return alpha * lipschitz * B_max**2 * T**2 / (2.0 * beta * epsilon_v) + T**2 * epsilon1 / epsilon_v


class DiagnosticsReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma_hat: float | None = Field(None, ge=0)
    gamma_uncertainty: float | None = None
    contractive: bool | None = None
    sigma_min_M: float | None = None
    sigma_max_M: float | None = None
    beta_hat: float | None = None
    kappa_hat: float | None = Field(None, ge=1)
    lambda_plus: float | None = None
    lambda_minus: float | None = None
    full_rank: bool | None = None
    hjb_residual_hat: float | None = Field(None, ge=0)
    B_max_hat: float | None = None
    delta_var_hat: float | None = None
    delta_var_unsquared: float | None = None
    delta_theta_sq_hat: float | None = None
    epsilon_v_hat: float | None = None
    epsilon1_hat: float | None = None
    angle: float | None = Field(None, ge=0, le=math.pi)
    inner: float | None = None
    descent: bool | None = None
    pointwise_alignment: bool | None = None
    nonconverged_rate: float | None = Field(None, ge=0, le=1)
    pass_A1: bool | None = None
    pass_A3: bool | None = None
    pass_A4: bool | None = None
    not_estimated: list[str] = Field(default_factory=lambda: list(UNIDENTIFIABLE))

    @model_validator(mode="after")
    def flag_absent(self):
        absent = set(self.not_estimated)
        for name, value in list(self):
            if isinstance(value, float) and not math.isfinite(value):
                setattr(self, name, None)
                value = None
            if value is None:
                absent.add(name)
        ordered = [n for n in UNIDENTIFIABLE if n in absent] + sorted(absent - set(UNIDENTIFIABLE))
        self.not_estimated = ordered
        return self


def _theta(operator, theta):
    return np.asarray(value_of(operator.value_fn.theta if theta is None else theta), dtype=np.float64)


def _iter_points(points):
    return points.flat() if isinstance(points, SamplePoints) else iter(points)


def assumption_checks(report: dict) -> dict:
    """pass/fail flags for the contraction, rank and variance assumptions."""
    gamma = report.get("gamma_hat")
    pass_A1 = None if gamma is None else gamma < 1.0
    kappa = report.get("kappa_hat")
    if report.get("full_rank") is None:
        pass_A3 = None
    elif not report["full_rank"] or not pass_A1:
        pass_A3 = False
    else:
        pass_A3 = gamma == 0.0 or kappa < 1.0 / gamma
    margin = None
    if None not in (gamma, report.get("lambda_minus"), report.get("lambda_plus"), report.get("delta_var_hat")):
        margin = report["lambda_minus"] - gamma * report["lambda_plus"] - report["delta_var_hat"]
    return {"pass_A1": pass_A1, "pass_A3": pass_A3, "pass_A4": None if margin is None else margin > 0, "margin": margin}


def audit(operator, batch, grid: Grid, theta=None, power_iters: int = 100, rank_tol: float = RANK_TOL,
          max_params: int = 100_000, seed: int = 0) -> DiagnosticsReport:
    """Run every audit for one frozen theta on one batch."""
    if grid.integrator != "euler":
        logger.info("audits use per-step integrands; re-running the %s grid with euler at N=%d", grid.integrator, grid.N)
        grid = grid.model_copy(update={"integrator": "euler"})
    theta = _theta(operator, theta)
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    problem = operator.problem
    m = operator.num_controls
    points = collect_points(operator, theta, batch, grid)

    contraction = estimate_contraction(operator, points, power_iters, theta, seed)
    block = m if m <= MAX_DENSE_CONTROLS else problem.control_per_agent
    spectrum = m_theta_spectrum(operator, points, theta, rank_tol, block)
    values = {
        "gamma_hat": contraction.gamma_hat,
        "gamma_uncertainty": contraction.uncertainty,
        "contractive": contraction.contractive,
        "sigma_min_M": spectrum.sigma_min,
        "sigma_max_M": spectrum.sigma_max,
        "beta_hat": 1.0 / spectrum.sigma_max**2 if spectrum.sigma_max > 0 else None,
        "kappa_hat": spectrum.kappa_hat,
        "lambda_plus": spectrum.lambda_plus,
        "lambda_minus": spectrum.lambda_minus,
        "full_rank": spectrum.full_rank,
        "hjb_residual_hat": hjb_residual_max(operator, points, theta),
    }

    jfb = grad_jfb(operator, batch, grid, GradientConfig(keep_steps=True), theta)
    values["nonconverged_rate"] = jfb.nonconverged_rate
    values["B_max_hat"] = float(np.linalg.norm(jfb.per_step_h, axis=-1).max())

    if m > MAX_DENSE_CONTROLS or theta.size > max_params or not contraction.contractive:
        logger.info("true-gradient audits skipped (m=%d, p=%d, gamma_hat=%.4g)", m, theta.size, contraction.gamma_hat)
        values.update(assumption_checks(values))
        values.pop("margin")
        return DiagnosticsReport(**values)

    true = grad_implicit(operator, batch, grid, GradientConfig(keep_steps=True), theta)
    alignment = alignment_report(true, jfb)
    values.update(angle=alignment.angle, inner=alignment.inner, descent=alignment.descent, epsilon_v_hat=alignment.epsilon_v)
    values["B_max_hat"] = float(np.linalg.norm(true.per_step_h, axis=-1).max())

    if len(batch) >= 2:
        mv = m_theta_v(operator, theta, points, true.per_step_v)
        variance = variance_audit(true.per_step_v, true.per_step_w, mv, true.per_step_h)
        values["delta_var_hat"] = variance.delta_var_hat
        values["delta_var_unsquared"] = variance.delta_var_unsquared
        values["epsilon1_hat"] = epsilon1_hat(variance, contraction.gamma_hat, spectrum.lambda_minus, spectrum.lambda_plus)

    checks = assumption_checks(values)
    margin = checks.pop("margin")
    values.update(checks)
    if margin is not None:
        per_step = margin * variance.mean_mv_sq
        values["delta_theta_sq_hat"] = float(per_step.min())
        if checks["pass_A1"] and checks["pass_A3"] and checks["pass_A4"]:
            values["pointwise_alignment"] = bool(np.all(variance.inner_vw >= per_step - 1e-8))
    return DiagnosticsReport(**values)
