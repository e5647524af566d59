import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose
from pydantic import ValidationError

from hamiltonian import (
    FixedPointDivergence,
    HamiltonianOperator,
    OperatorConfig,
    SingularJacobianError,
    implicit_pullback,
    jacobian_u,
    jvp_theta_fd,
    theta_rows,
    vjp_theta,
)
from problems import DomainError, consumption_foc_residual, make_problem
from valuenet import ValueNetwork


def scalar_lqr(**params):
    defaults = {"A": [[0.0]], "B": [[1.0]], "Q": [[0.0]], "R": [[1.0]], "Q_T": [[1.0]]}
    defaults.update(params)
    return make_problem("lqr", params=defaults)


def zero_net(n):
    net = ValueNetwork(n, widths=[1 + n, 4, 1])
    net.set_theta(np.zeros(net.num_params))
    return net


def random_net(n, seed=0, hidden=6, scale=1.0):
    net = ValueNetwork(n, widths=[1 + n, hidden, 1], seed=seed)
    net.set_theta(np.random.default_rng(seed).uniform(-scale, scale, net.num_params))
    return net


class GradientTests(SimpleTestCase):
    def test_lqr_gradient_is_affine(self):
        problem = make_problem("lqr", params={
            "A": np.eye(2).tolist(), "B": [[1.0, 0.0], [0.5, 2.0]], "Q": np.eye(2).tolist(),
            "R": [[2.0, 0.3], [0.3, 1.0]], "Q_T": np.eye(2).tolist(),
        })
        net = random_net(2)
        op = HamiltonianOperator(problem, net)
        z, u = np.array([0.3, -0.4]), np.array([0.2, 0.7])
        p = net.grad_z_phi(net.theta, 0.1, z)
        assert_allclose(op.grad_u_H(net.theta, 0.1, z, u), -problem.R @ u - problem.B.T @ p, rtol=1e-12)
        u_star = problem.exact_maximizer(0.1, z, p)
        assert_allclose(op.grad_u_H(net.theta, 0.1, z, u_star), 0.0, atol=1e-12)

    def test_zero_costate_quadratic_cost(self):
        op = HamiltonianOperator(scalar_lqr(), zero_net(1))
        assert_allclose(op.grad_u_H(op.value_fn.theta, 0.0, np.array([2.0]), np.array([0.8])), [-0.8])

    def test_consumption_gradient_is_economic_residual_with_flipped_costate(self):
        problem = make_problem("consumption", agents=1, params={"m": 2, "A": [0.5, 0.3]})
        net = random_net(problem.n, seed=3)
        op = HamiltonianOperator(problem, net)
        z = np.array([1.4, 0.15, 0.25])
        u = np.array([0.6, 0.9])
        p = net.grad_z_phi(net.theta, 0.2, z)
        expected = consumption_foc_residual(problem.params, 0.2, z[0], z[1:], u, -p[0], -p[1:])
        assert_allclose(op.grad_u_H(net.theta, 0.2, z, u), expected, rtol=1e-12)

    def test_consumption_domain_violation(self):
        problem = make_problem("consumption")
        op = HamiltonianOperator(problem, zero_net(2))
        with self.assertRaises(DomainError):
            op.grad_u_H(op.value_fn.theta, 0.0, np.array([1.0, 0.3]), np.array([0.25]))


class ApplyTests(SimpleTestCase):
    def setUp(self):
        self.problem = scalar_lqr()
        self.net = zero_net(1)

    def op(self, eta, **kwargs):
        return HamiltonianOperator(self.problem, self.net, OperatorConfig(eta=eta, **kwargs))

    def test_value_function_must_expose_costate(self):
        with self.assertRaises(TypeError):
            HamiltonianOperator(self.problem, lambda t, z: 0.0)
        self.assertIs(self.op(0.5).value_fn, self.net)
        HamiltonianOperator(self.problem, self.problem.optimal_value(10))

    def test_small_step_contracts_towards_maximizer(self):
        out = self.op(0.01).apply(self.net.theta, 0.0, np.zeros(1), np.array([1.0]))
        assert_allclose(out, [0.99])

    def test_unit_step_is_exact(self):
        op = self.op(1.0)
        assert_allclose(op.apply(self.net.theta, 0.0, np.zeros(1), np.array([1.0])), [0.0])
        assert_allclose(jacobian_u(op, self.net.theta, 0.0, np.zeros(1), np.array([1.0])), [[0.0]])

    def test_contraction_factor_is_one_minus_eta(self):
        problem = make_problem("lqr", params={
            "A": np.zeros((3, 3)).tolist(), "B": np.eye(3).tolist(), "Q": np.eye(3).tolist(),
            "R": np.eye(3).tolist(), "Q_T": np.eye(3).tolist(),
        })
        net = random_net(3, seed=5)
        rng = np.random.default_rng(0)
        for eta in (0.01, 0.5, 1.5):
            op = HamiltonianOperator(problem, net, OperatorConfig(eta=eta))
            for _ in range(10):
                z = rng.uniform(-1, 1, 3)
                u1, u2 = rng.normal(size=3), rng.normal(size=3)
                ratio = np.linalg.norm(op.apply(net.theta, 0.3, z, u1) - op.apply(net.theta, 0.3, z, u2)) / np.linalg.norm(u1 - u2)
                self.assertAlmostEqual(ratio, abs(1 - eta), delta=1e-10)


class SolverTests(SimpleTestCase):
    def test_lqr_converges_to_closed_form(self):
        problem = scalar_lqr(R=[[2.0]], B=[[1.5]])
        net = random_net(1, seed=2)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.3, tol=1e-12, max_iter=1000))
        z = np.array([0.7])
        result = op.solve_fixed_point(net.theta, 0.4, z, np.zeros(1))
        self.assertTrue(result.converged)
        p = net.grad_z_phi(net.theta, 0.4, z)
        assert_allclose(result.u_star, problem.exact_maximizer(0.4, z, p), atol=1e-10)
        self.assertLessEqual(result.iters, 1000)
        self.assertEqual(len(result.history), result.iters)

    def test_start_at_fixed_point(self):
        problem = scalar_lqr()
        net = random_net(1)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.5))
        z = np.array([0.2])
        u_star = problem.exact_maximizer(0.0, z, net.grad_z_phi(net.theta, 0.0, z))
        result = op.solve_fixed_point(net.theta, 0.0, z, u_star)
        self.assertLessEqual(result.iters, 1)
        self.assertLessEqual(result.residual, op.cfg.tol)

    def test_iteration_cap(self):
        with self.assertRaises(ValidationError):
            OperatorConfig(max_iter=0)
        op = HamiltonianOperator(scalar_lqr(), zero_net(1), OperatorConfig(eta=0.01, max_iter=1))
        result = op.solve_fixed_point(op.value_fn.theta, 0.0, np.zeros(1), np.array([50.0]))
        self.assertFalse(result.converged)
        self.assertEqual(result.iters, 1)

    def test_residual_decreases_monotonically(self):
        cases = [
            (scalar_lqr(R=[[3.0]]), OperatorConfig(eta=0.2, tol=1e-10, max_iter=2000)),
            (make_problem("quadrotor"), OperatorConfig(eta=2.0, tol=1e-10, max_iter=2000)),
        ]
        for problem, cfg in cases:
            net = random_net(problem.n, seed=1, hidden=8, scale=0.3)
            op = HamiltonianOperator(problem, net, cfg)
            z = problem.sample_states(0, 1)[0]
            result = op.solve_fixed_point(net.theta, 0.1, z)
            with self.subTest(problem=problem.name):
                self.assertTrue(result.converged)
                self.assertTrue(np.all(np.diff(result.history) <= 1e-15))

    def test_converged_gradient_bound(self):
        problem = make_problem("quadrotor")
        net = random_net(problem.n, seed=4, hidden=8, scale=0.3)
        cfg = OperatorConfig(eta=2.0, tol=1e-8, max_iter=2000)
        op = HamiltonianOperator(problem, net, cfg)
        z = problem.sample_states(1, 1)[0]
        result = op.solve_fixed_point(net.theta, 0.5, z)
        grad = op.grad_u_H(net.theta, 0.5, z, result.u_star)
        self.assertLessEqual(np.abs(grad).max(), cfg.tol / cfg.eta)

    def test_divergence_is_reported(self):
        net = random_net(1)
        op = HamiltonianOperator(scalar_lqr(), net, OperatorConfig(eta=3.0, tol=1e-300, max_iter=5000))
        with np.errstate(over="ignore", invalid="ignore"):
            with self.assertRaises(FixedPointDivergence) as ctx:
                op.solve_fixed_point(net.theta, 0.25, np.array([0.5]), np.array([1.0]))
        self.assertEqual(ctx.exception.t, 0.25)
        self.assertGreater(ctx.exception.iteration, 100)

    def test_warm_start_toggle(self):
        problem = scalar_lqr()
        warm = HamiltonianOperator(problem, zero_net(1), OperatorConfig(warm_start=True))
        cold = HamiltonianOperator(problem, zero_net(1), OperatorConfig(warm_start=False))
        assert_allclose(warm.initial_control(np.zeros(1), np.array([0.4])), [0.4])
        assert_allclose(cold.initial_control(np.zeros(1), np.array([0.4])), [0.0])


class LocalTapeTests(SimpleTestCase):
    def setUp(self):
        self.problem = make_problem("bicycle")
        self.net = random_net(4, seed=8)
        self.op = HamiltonianOperator(self.problem, self.net, OperatorConfig(eta=0.1))
        self.z = np.array([0.5, -0.3, 0.2, 1.0])
        self.u = np.array([0.1, 0.3])

    def test_jacobian_matches_finite_differences(self):
        J = jacobian_u(self.op, self.net.theta, 0.2, self.z, self.u)
        step = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = step
            column = (self.op.apply(self.net.theta, 0.2, self.z, self.u + e)
                      - self.op.apply(self.net.theta, 0.2, self.z, self.u - e)) / (2 * step)
            assert_allclose(J[:, j], column, rtol=1e-6, atol=1e-9)

    def test_theta_rows_agree_with_vjp_and_jvp(self):
        M = theta_rows(self.op, self.net.theta, 0.2, self.z, self.u)
        self.assertEqual(M.shape, (2, self.net.num_params))
        c = np.array([0.4, -1.2])
        assert_allclose(vjp_theta(self.op, self.net.theta, 0.2, self.z, self.u, c), c @ M, rtol=1e-12, atol=1e-14)
        v = np.random.default_rng(0).normal(size=self.net.num_params)
        assert_allclose(jvp_theta_fd(self.op, self.net.theta, 0.2, self.z, self.u, v), M @ v, rtol=1e-3, atol=1e-4)


class HjbResidualTests(SimpleTestCase):
    def test_riccati_value_nearly_solves_hjb(self):
        problem = scalar_lqr()
        value = problem.optimal_value(1000)
        op = HamiltonianOperator(problem, value)
        z = np.array([0.8])
        p = value.grad_z_phi(value.theta, 0.3, z)
        u_star = problem.exact_maximizer(0.3, z, p)
        self.assertLess(abs(op.hjb_residual(value.theta, 0.3, z, u_star, step=1e-4)), 1e-3)


class ImplicitPullbackTests(SimpleTestCase):
    def test_solves_transposed_system(self):
        op = HamiltonianOperator(scalar_lqr(), zero_net(1), OperatorConfig(eta=0.5))
        pullback, radius = implicit_pullback(op, op.value_fn.theta, 0.0, np.zeros(1), np.zeros(1))
        self.assertAlmostEqual(radius, 0.5)
        assert_allclose(pullback(np.array([3.0])), [6.0])

    def test_expansive_operator_is_rejected(self):
        op = HamiltonianOperator(scalar_lqr(), zero_net(1), OperatorConfig(eta=3.0))
        with self.assertRaises(SingularJacobianError) as ctx:
            implicit_pullback(op, op.value_fn.theta, 0.5, np.zeros(1), np.zeros(1))
        self.assertAlmostEqual(ctx.exception.spectral_radius, 2.0)
        self.assertIn("t=0.5", str(ctx.exception))
