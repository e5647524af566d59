import json
import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose
from pydantic import ValidationError

from diagnostics import (
    AuditError,
    DiagnosticsReport,
    alignment_report,
    assumption_checks,
    audit,
    collect_points,
    epsilon1_hat,
    estimate_contraction,
    hjb_residual_max,
    m_theta_spectrum,
    m_theta_v,
    neighborhood_bound,
    variance_audit,
)
from grad import GradientConfig, grad_implicit, grad_jfb
from hamiltonian import HamiltonianOperator, OperatorConfig, theta_rows
from problems import make_problem
from rollout import Grid
from tape import ops
from valuenet import ValueNetwork


class AffineOperator:
    """T(u) = A u + C theta."""

    def __init__(self, A, C):
        self.A = np.asarray(A, dtype=np.float64)
        self.C = np.asarray(C, dtype=np.float64)
        self.num_controls = self.A.shape[0]

    def apply(self, theta, t, z, u):
        return ops.matmul(self.A, u) + ops.matmul(self.C, theta)


def point(m):
    return [(0.0, np.zeros(1), np.zeros(m))]


def random_net(n, seed=0, hidden=6, scale=1.0):
    net = ValueNetwork(n, widths=[1 + n, hidden, 1], seed=seed)
    net.set_theta(np.random.default_rng(seed).uniform(-scale, scale, net.num_params))
    return net


def lqr(n, eta, seed=0):
    problem = make_problem("lqr", params={
        "A": np.zeros((n, n)).tolist(), "B": np.eye(n).tolist(), "Q": np.eye(n).tolist(),
        "R": np.eye(n).tolist(), "Q_T": np.eye(n).tolist(),
    })
    net = random_net(n, seed=seed)
    return problem, HamiltonianOperator(problem, net, OperatorConfig(eta=eta, tol=1e-10, max_iter=2000))


class ContractionTests(SimpleTestCase):
    def test_lqr_identity_curvature(self):
        problem, op = lqr(3, 0.01)
        points = collect_points(op, op.value_fn.theta, problem.sample_states(0, 2), Grid(N=4))
        est = estimate_contraction(op, points)
        self.assertAlmostEqual(est.gamma_hat, 0.99, delta=1e-6)
        self.assertTrue(est.contractive)
        self.assertEqual(len(est.per_point), 8)

    def test_exact_and_expansive_steps(self):
        for eta, gamma in ((1.0, 0.0), (3.0, 2.0), (0.5, 0.5)):
            problem, op = lqr(1, eta)
            est = estimate_contraction(op, [(0.0, np.array([0.3]), np.array([0.1]))])
            with self.subTest(eta=eta):
                self.assertAlmostEqual(est.gamma_hat, gamma, delta=1e-10)
                self.assertEqual(est.contractive, gamma < 1)

    def test_matches_dense_svd(self):
        rng = np.random.default_rng(1)
        for m in (2, 5, 8):
            U, _ = np.linalg.qr(rng.normal(size=(m, m)))
            V, _ = np.linalg.qr(rng.normal(size=(m, m)))
            s = np.linspace(0.9, 0.1, m)
            A = U @ np.diag(s) @ V.T
            op = AffineOperator(A, np.zeros((m, 2)))
            est = estimate_contraction(op, point(m), iters=200, theta=np.zeros(2))
            with self.subTest(m=m):
                self.assertAlmostEqual(est.gamma_hat, np.linalg.svd(A, compute_uv=False)[0], delta=1e-6)

    def test_minimum_iterations(self):
        with self.assertRaises(AuditError):
            estimate_contraction(AffineOperator(np.eye(1), np.zeros((1, 1))), point(1), iters=5, theta=np.zeros(1))


class SpectrumTests(SimpleTestCase):
    def test_identity_map(self):
        spectrum = m_theta_spectrum(AffineOperator(np.eye(3), np.eye(3)), point(3), theta=np.zeros(3))
        self.assertAlmostEqual(spectrum.sigma_min, 1.0)
        self.assertAlmostEqual(spectrum.sigma_max, 1.0)
        self.assertAlmostEqual(spectrum.kappa_hat, 1.0)
        self.assertTrue(spectrum.full_rank)

    def test_scaling_doubles_singular_values(self):
        C = np.array([[1.0, 0.5, 0.0], [0.0, 1.0, 2.0]])
        base = m_theta_spectrum(AffineOperator(np.eye(2), C), point(2), theta=np.zeros(3))
        doubled = m_theta_spectrum(AffineOperator(np.eye(2), 2 * C), point(2), theta=np.zeros(3))
        self.assertAlmostEqual(doubled.sigma_max, 2 * base.sigma_max)
        self.assertAlmostEqual(doubled.sigma_min, 2 * base.sigma_min)
        self.assertAlmostEqual(doubled.kappa_hat, base.kappa_hat)

    def test_matches_svd_of_assembled_rows(self):
        problem = make_problem("bicycle")
        net = random_net(4, seed=2)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.1))
        pts = [(0.2, np.array([0.1, -0.4, 0.3, 1.1]), np.array([0.2, 0.1]))]
        spectrum = m_theta_spectrum(op, pts)
        s = np.linalg.svd(theta_rows(op, net.theta, *pts[0]), compute_uv=False)
        self.assertAlmostEqual(spectrum.sigma_max, s[0], delta=1e-8)
        self.assertAlmostEqual(spectrum.sigma_min, s[-1], delta=1e-8)

    def test_rank_deficient(self):
        C = np.array([[1.0, 0.0], [0.0, 0.0]])
        spectrum = m_theta_spectrum(AffineOperator(np.eye(2), C), point(2), theta=np.zeros(2))
        self.assertFalse(spectrum.full_rank)
        self.assertIsNone(spectrum.kappa_hat)
        checks = assumption_checks({"gamma_hat": 0.5, "full_rank": spectrum.full_rank, "kappa_hat": spectrum.kappa_hat})
        self.assertFalse(checks["pass_A3"])

    def test_agent_blocks(self):
        C = np.array([[1.0, 0.0], [0.0, 3.0]])
        spectrum = m_theta_spectrum(AffineOperator(np.eye(2), C), point(2), theta=np.zeros(2), block=1)
        self.assertAlmostEqual(spectrum.lambda_minus, 1.0)
        self.assertAlmostEqual(spectrum.lambda_plus, 9.0)
        self.assertAlmostEqual(spectrum.kappa_hat, 1.0)
        with self.assertRaises(AuditError):
            m_theta_spectrum(AffineOperator(np.eye(3), np.eye(3)), point(3), theta=np.zeros(3), block=2)


class AlignmentTests(SimpleTestCase):
    def test_identical_and_opposite(self):
        g = np.array([1.0, -2.0, 0.5])
        same = alignment_report(g, g)
        self.assertAlmostEqual(same.angle, 0.0, places=7)
        self.assertAlmostEqual(same.epsilon_v, 1.0)
        self.assertTrue(same.descent)
        opposite = alignment_report(g, -g)
        self.assertAlmostEqual(opposite.angle, math.pi)
        self.assertFalse(opposite.descent)

    def test_zero_gradient(self):
        report = alignment_report(np.zeros(3), np.ones(3))
        self.assertIsNone(report.angle)
        self.assertIsNone(report.descent)

    def test_one_step_exact_operator(self):
        problem = make_problem("lqr", params={"Q": [[1.0]]})
        op = HamiltonianOperator(problem, random_net(1, seed=3), OperatorConfig(eta=1.0))
        batch = problem.sample_states(3, 4)
        report = alignment_report(grad_implicit(op, batch, Grid(N=10)), grad_jfb(op, batch, Grid(N=10)))
        self.assertLessEqual(report.angle, 1e-6)


class VarianceTests(SimpleTestCase):
    def test_hand_case(self):
        v = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        result = variance_audit(v, v, v, h=np.array([[[3.0, 4.0]], [[0.0, 1.0]]]))
        assert_allclose(result.var_v, [0.5])
        assert_allclose(result.mean_mv_sq, [0.5])
        self.assertAlmostEqual(result.delta_var_hat, 0.5)
        self.assertAlmostEqual(result.delta_var_unsquared, 0.5 / math.sqrt(0.5))
        self.assertAlmostEqual(result.B_max_hat, 5.0)
        assert_allclose(result.inner_vw, [0.5])

    def test_identical_samples_have_no_variance(self):
        problem, op = lqr(2, 0.5, seed=4)
        batch = np.repeat(problem.sample_states(4, 1), 3, axis=0)
        grid = Grid(N=5)
        est = grad_implicit(op, batch, grid, GradientConfig(keep_steps=True))
        points = collect_points(op, op.value_fn.theta, batch, grid)
        mv = m_theta_v(op, None, points, est.per_step_v)
        result = variance_audit(est.per_step_v, est.per_step_w, mv)
        self.assertEqual(result.delta_var_hat, 0.0)

    def test_batch_of_one(self):
        v = np.ones((1, 3, 2))
        with self.assertRaises(AuditError):
            variance_audit(v, v, v)

    def test_epsilon1(self):
        v = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        result = variance_audit(v, v, v)
        self.assertEqual(epsilon1_hat(result, 0.5, 2.0, 1.0), 0.0)
        # delta_ref = 0.5 * (1.0 - 0.5 * 1.0) = 0.25 leaves 0.25 - 0.125
        self.assertAlmostEqual(epsilon1_hat(result, 0.5, 1.0, 1.0), 0.125)
        self.assertIsNone(epsilon1_hat(result, 0.9, 0.1, 1.0))

    def test_neighborhood_bound(self):
        self.assertAlmostEqual(neighborhood_bound(0.1, 2.0, 3.0, 1.0, 0.5, 0.25, 0.01), 0.1 * 2 * 9 / 0.25 + 0.01 / 0.25)
        self.assertIsNone(neighborhood_bound(0.1, None, 3.0, 1.0, 0.5, 0.25, 0.01))
        self.assertIsNone(neighborhood_bound(0.1, 2.0, 3.0, 1.0, 0.5, -0.1, 0.01))


class ReportTests(SimpleTestCase):
    def test_absent_values_are_flagged(self):
        report = DiagnosticsReport(gamma_hat=0.5, kappa_hat=float("inf"))
        self.assertIsNone(report.kappa_hat)
        self.assertIn("kappa_hat", report.not_estimated)
        self.assertEqual(report.not_estimated[:6], ["L_J", "J_inf", "a_v", "a_w", "delta_v", "delta_w"])
        self.assertNotIn("gamma_hat", report.not_estimated)

    def test_schema(self):
        schema = DiagnosticsReport.model_json_schema()
        self.assertIn("pass_A3", schema["properties"])
        with self.assertRaises(ValidationError):
            DiagnosticsReport(kappa_hat=0.5)
        with self.assertRaises(ValidationError):
            DiagnosticsReport(gamma=0.5)

    def test_assumption_checks(self):
        base = {"gamma_hat": 0.5, "full_rank": True, "lambda_minus": 2.0, "lambda_plus": 1.0, "delta_var_hat": 0.5}
        self.assertTrue(assumption_checks({**base, "kappa_hat": 1.5})["pass_A3"])
        self.assertFalse(assumption_checks({**base, "kappa_hat": 3.0})["pass_A3"])
        checks = assumption_checks({**base, "kappa_hat": 1.5})
        self.assertTrue(checks["pass_A4"])
        self.assertAlmostEqual(checks["margin"], 1.0)
        self.assertFalse(assumption_checks({**base, "delta_var_hat": 2.0})["pass_A4"])


class AuditTests(SimpleTestCase):
    def test_full_report_on_lqr(self):
        problem, op = lqr(2, 0.5, seed=5)
        report = audit(op, problem.sample_states(5, 3), Grid(N=5))
        self.assertAlmostEqual(report.gamma_hat, 0.5, delta=1e-6)
        self.assertTrue(report.pass_A1)
        self.assertIsNotNone(report.angle)
        self.assertIsNotNone(report.delta_var_hat)
        self.assertEqual(report.nonconverged_rate, 0.0)
        if report.pass_A4 is not None and report.delta_theta_sq_hat is not None:
            self.assertEqual(report.pass_A4, report.delta_theta_sq_hat >= 0)
        again = DiagnosticsReport.model_validate(json.loads(report.model_dump_json()))
        self.assertEqual(again, report)

    def test_non_contractive_operator_skips_true_gradient(self):
        problem, op = lqr(1, 2.5, seed=6)
        op = HamiltonianOperator(problem, op.value_fn, OperatorConfig(eta=2.5, max_iter=3))
        report = audit(op, problem.sample_states(6, 2), Grid(N=3))
        self.assertFalse(report.pass_A1)
        self.assertFalse(report.pass_A3)
        self.assertIsNone(report.angle)
        self.assertIn("angle", report.not_estimated)

    def test_rk4_grid_is_audited_on_euler(self):
        problem, op = lqr(2, 0.5, seed=5)
        batch = problem.sample_states(5, 3)
        on_rk4 = audit(op, batch, Grid(N=5, integrator="rk4"))
        on_euler = audit(op, batch, Grid(N=5))
        self.assertEqual(on_rk4, on_euler)
        self.assertIsNotNone(on_rk4.angle)

    def test_report_carries_hjb_residual(self):
        problem, op = lqr(2, 0.5, seed=5)
        batch = problem.sample_states(5, 3)
        report = audit(op, batch, Grid(N=5))
        points = collect_points(op, op.value_fn.theta, batch, Grid(N=5))
        self.assertAlmostEqual(report.hjb_residual_hat, hjb_residual_max(op, points), places=12)
        self.assertNotIn("hjb_residual_hat", report.not_estimated)


class HjbResidualTests(SimpleTestCase):
    def test_riccati_value_is_nearly_optimal(self):
        problem = make_problem("lqr", params={"A": [[0.0]], "B": [[1.0]], "Q": [[0.0]], "R": [[1.0]], "Q_T": [[1.0]]})
        value = problem.optimal_value(1000)
        op = HamiltonianOperator(problem, value, OperatorConfig(eta=1.0))
        points = collect_points(op, value.theta, np.array([[0.8], [-0.5]]), Grid(N=100))
        self.assertLess(hjb_residual_max(op, points, value.theta), 1e-2)

    def test_no_points(self):
        problem, op = lqr(1, 0.5)
        self.assertEqual(hjb_residual_max(op, []), 0.0)
