from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from grad import (
    BackendError,
    GradientConfig,
    SingularJacobianError,
    central_differences,
    estimate,
    finite_diff_grad,
    grad_implicit,
    grad_jfb,
    grad_unrolled,
)
from hamiltonian import HamiltonianOperator, OperatorConfig
from problems import make_problem
from rollout import Grid
from tape import NodeBudgetExceeded
from valuenet import ValueNetwork


def zero_net(n):
    net = ValueNetwork(n, widths=[1 + n, 4, 1])
    net.set_theta(np.zeros(net.num_params))
    return net


def random_net(n, seed=0, hidden=6, scale=1.0):
    net = ValueNetwork(n, widths=[1 + n, hidden, 1], seed=seed)
    net.set_theta(np.random.default_rng(seed).uniform(-scale, scale, net.num_params))
    return net


def scalar_lqr(**params):
    defaults = {"A": [[0.0]], "B": [[1.0]], "Q": [[0.0]], "R": [[1.0]], "Q_T": [[1.0]]}
    defaults.update(params)
    return make_problem("lqr", params=defaults)


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class JfbTests(SimpleTestCase):
    def test_one_step_exact_operator_matches_implicit(self):
        problem = scalar_lqr(Q=[[1.0]], A=[[0.3]])
        net = random_net(1, seed=1)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=1.0))
        batch = problem.sample_states(0, 4)
        jfb = grad_jfb(op, batch, Grid(N=10))
        implicit = grad_implicit(op, batch, Grid(N=10))
        assert_allclose(jfb.direction, implicit.direction, rtol=1e-10, atol=1e-14)

    def test_no_control_influence_gives_zero_direction(self):
        problem = scalar_lqr(B=[[0.0]], Q=[[1.0]])
        op = HamiltonianOperator(problem, zero_net(1), OperatorConfig(eta=1.0))
        batch = problem.sample_states(1, 3)
        for fn in (grad_jfb, grad_implicit):
            with self.subTest(backend=fn.__name__):
                assert_allclose(fn(op, batch, Grid(N=5)).direction, 0.0, atol=1e-15)

    def test_work_units_are_steps_times_batch(self):
        problem = scalar_lqr()
        op = HamiltonianOperator(problem, random_net(1), OperatorConfig(eta=0.5))
        est = grad_jfb(op, problem.sample_states(2, 16), Grid(N=50))
        self.assertEqual(est.work_units, 800)
        self.assertEqual(est.batch_size, 16)
        self.assertEqual(est.solves, 800)

    def test_peak_nodes_do_not_depend_on_inner_iterations(self):
        problem = make_problem("quadrotor")
        net = random_net(problem.n, seed=3, hidden=8, scale=0.3)
        batch = problem.sample_states(3, 2)
        peaks, works = [], []
        for max_iter in (10, 50, 200, 500):
            op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.5, tol=1e-12, max_iter=max_iter))
            est = grad_jfb(op, batch, Grid(N=5))
            peaks.append(est.peak_nodes)
            works.append(est.work_units)
        self.assertEqual(len(set(peaks)), 1)
        self.assertEqual(works, [10, 10, 10, 10])

    def test_keep_steps_integrands_sum_to_direction(self):
        problem = scalar_lqr(Q=[[1.0]])
        op = HamiltonianOperator(problem, random_net(1, seed=4), OperatorConfig(eta=0.5, tol=1e-10))
        grid = Grid(N=8)
        est = grad_jfb(op, problem.sample_states(4, 3), grid, GradientConfig(keep_steps=True))
        self.assertEqual(est.per_step_w.shape, (3, 8, op.value_fn.num_params))
        self.assertIsNone(est.per_step_v)
        assert_allclose(grid.dt * est.per_step_w.sum(axis=1), est.per_sample, rtol=1e-12, atol=1e-15)
        self.assertEqual(est.per_step_h.shape, (3, 8, 1))

    def test_step_integrands_need_euler_grid(self):
        problem = scalar_lqr(Q=[[1.0]])
        op = HamiltonianOperator(problem, random_net(1, seed=4), OperatorConfig(eta=0.5))
        for fn in (grad_jfb, grad_implicit):
            with self.subTest(backend=fn.__name__), self.assertRaises(ValueError):
                fn(op, problem.sample_states(4, 2), Grid(N=4, integrator="rk4"), GradientConfig(keep_steps=True))

    def test_rk4_work_counts_every_stage(self):
        problem = scalar_lqr(Q=[[1.0]], A=[[0.3]])
        op = HamiltonianOperator(problem, random_net(1, seed=1), OperatorConfig(eta=1.0))
        batch = problem.sample_states(0, 3)
        self.assertEqual(grad_jfb(op, batch, Grid(N=10)).work_units, 30)
        # four stage solves per step
        self.assertEqual(grad_jfb(op, batch, Grid(N=10, integrator="rk4")).work_units, 120)

    def test_exact_operator_integrands_agree_on_euler(self):
        problem = make_problem("lqr", params={"A": [[0.3]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]], "Q_T": [[1.0]]})
        op = HamiltonianOperator(problem, random_net(1, seed=1), OperatorConfig(eta=1.0, tol=1e-12))
        grid = Grid(N=10)
        batch = problem.sample_states(0, 3)
        jfb = grad_jfb(op, batch, grid, GradientConfig(keep_steps=True))
        true = grad_implicit(op, batch, grid, GradientConfig(keep_steps=True))
        assert_allclose(true.per_step_w, true.per_step_v, atol=1e-12)
        assert_allclose(grid.dt * true.per_step_w.sum(axis=1), jfb.per_sample, rtol=1e-10, atol=1e-14)
        self.assertEqual(jfb.work_units, 30)


class ImplicitTests(SimpleTestCase):
    def test_matches_unrolled_on_lqr(self):
        problem = make_problem("lqr", params={
            "A": [[0.0, 1.0], [0.0, 0.0]], "B": [[0.0], [1.0]], "Q": np.eye(2).tolist(),
            "R": [[2.0]], "Q_T": np.eye(2).tolist(),
        })
        net = random_net(2, seed=5)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.4, tol=1e-10, max_iter=500))
        batch = problem.sample_states(5, 4)
        implicit = grad_implicit(op, batch, Grid(N=20))
        unrolled = grad_unrolled(op, batch, Grid(N=20))
        self.assertLess(rel_err(implicit.direction, unrolled.direction), 1e-4)
        self.assertGreater(cosine(implicit.direction, unrolled.direction), 0.999)
        self.assertAlmostEqual(implicit.loss, unrolled.loss, places=8)

    def test_work_includes_jacobian_assembly(self):
        problem = make_problem("bicycle")
        op = HamiltonianOperator(problem, random_net(4, seed=6, scale=0.3), OperatorConfig(eta=0.2, tol=1e-10))
        est = grad_implicit(op, problem.sample_states(6, 2), Grid(N=5))
        # N marks in the sweep plus m basis sweeps per step
        self.assertEqual(est.work_units, 2 * (5 + 5 * 2))

    def test_step_integrands(self):
        problem = scalar_lqr(Q=[[1.0]])
        op = HamiltonianOperator(problem, random_net(1, seed=7), OperatorConfig(eta=1.0))
        grid = Grid(N=6)
        est = grad_implicit(op, problem.sample_states(7, 2), grid, GradientConfig(keep_steps=True))
        assert_allclose(grid.dt * est.per_step_v.sum(axis=1), est.per_sample, rtol=1e-12, atol=1e-15)
        # dT/du vanishes, so the literal JFB integrand equals the implicit one
        assert_allclose(est.per_step_w, est.per_step_v, rtol=1e-9, atol=1e-12)

    def test_non_contractive_operator(self):
        problem = scalar_lqr()
        op = HamiltonianOperator(problem, random_net(1), OperatorConfig(eta=3.0, max_iter=1))
        with self.assertRaises(SingularJacobianError) as ctx:
            grad_implicit(op, problem.sample_states(0, 1), Grid(N=3))
        self.assertAlmostEqual(ctx.exception.spectral_radius, 2.0)

    def test_dense_size_guard(self):
        problem = make_problem("quadrotor", agents=17)
        op = HamiltonianOperator(problem, zero_net(problem.n))
        with self.assertRaises(BackendError):
            grad_implicit(op, problem.sample_states(0, 1), Grid(N=2))


class UnrolledTests(SimpleTestCase):
    def test_matches_finite_differences(self):
        problem = scalar_lqr(Q=[[1.0]], A=[[0.3]])
        net = random_net(1, seed=8)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=1.0))
        batch = problem.sample_states(8, 3)
        grid = Grid(N=20)
        coords = np.random.default_rng(8).choice(net.num_params, size=20, replace=False)
        unrolled = grad_unrolled(op, batch, grid)
        fd = finite_diff_grad(op, batch, grid, coords, step=1e-6)
        assert_allclose(unrolled.direction[coords], fd.direction[coords], rtol=1e-5, atol=1e-9)
        assert_array_equal(fd.coords, coords)

    def test_single_iteration_exact_case_equals_jfb(self):
        problem = scalar_lqr(Q=[[1.0]])
        op = HamiltonianOperator(problem, random_net(1, seed=9), OperatorConfig(eta=1.0, max_iter=1))
        batch = problem.sample_states(9, 2)
        assert_allclose(grad_unrolled(op, batch, Grid(N=10)).direction,
                        grad_jfb(op, batch, Grid(N=10)).direction, rtol=1e-10, atol=1e-14)

    def test_memory_grows_with_iterations(self):
        problem = make_problem("quadrotor")
        net = random_net(problem.n, seed=10, hidden=8, scale=0.3)
        batch = problem.sample_states(10, 1)
        peaks, inner = [], []
        for max_iter in (2, 5, 10):
            op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.1, tol=1e-14, max_iter=max_iter))
            est = grad_unrolled(op, batch, Grid(N=3))
            peaks.append(est.peak_nodes)
            inner.append(est.inner_iterations)
            self.assertEqual(est.work_units, est.inner_iterations)
        self.assertEqual(inner, [6, 15, 30])
        self.assertTrue(peaks[0] < peaks[1] < peaks[2])

    def test_unrolled_needs_far_more_memory_than_jfb(self):
        problem = make_problem("quadrotor")
        net = random_net(problem.n, seed=11, hidden=8, scale=0.3)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.2, tol=1e-14, max_iter=100))
        batch = problem.sample_states(11, 1)
        jfb = grad_jfb(op, batch, Grid(N=5))
        unrolled = grad_unrolled(op, batch, Grid(N=5))
        self.assertGreater(unrolled.peak_nodes, 10 * jfb.peak_nodes)

    def test_node_budget(self):
        problem = scalar_lqr()
        op = HamiltonianOperator(problem, random_net(1), OperatorConfig(eta=0.01, tol=1e-14, max_iter=500))
        with self.assertRaises(NodeBudgetExceeded):
            grad_unrolled(op, problem.sample_states(0, 1), Grid(N=10), GradientConfig(node_budget=2000))


class FiniteDifferenceTests(SimpleTestCase):
    def test_constant_objective(self):
        assert_allclose(central_differences(lambda th: 3.0, np.ones(5), range(5)), 0.0)

    def test_quadratic_objective(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(6, 6))
        A = A @ A.T
        b = rng.normal(size=6)
        theta = rng.normal(size=6)
        values = central_differences(lambda th: 0.5 * th @ A @ th + b @ th, theta, range(6))
        assert_allclose(values, A @ theta + b, atol=1e-8)

    def test_coordinate_range(self):
        problem = scalar_lqr()
        op = HamiltonianOperator(problem, zero_net(1))
        with self.assertRaises(BackendError):
            finite_diff_grad(op, problem.sample_states(0, 1), Grid(N=2), coords=[op.value_fn.num_params])


class DispatchTests(SimpleTestCase):
    def setUp(self):
        self.problem = scalar_lqr(Q=[[1.0]])
        self.op = HamiltonianOperator(self.problem, random_net(1, seed=12), OperatorConfig(eta=1.0))
        self.batch = self.problem.sample_states(12, 2)

    def test_dispatch(self):
        for backend in ("jfb", "implicit", "unrolled"):
            with self.subTest(backend=backend):
                self.assertEqual(estimate(backend, self.op, self.batch, Grid(N=4)).backend, backend)
        fd = estimate("finite_diff", self.op, self.batch, Grid(N=4), coords=[0, 1])
        self.assertEqual(fd.work_units, 0)
        with self.assertRaises(BackendError):
            estimate("adjoint", self.op, self.batch, Grid(N=4))

    def test_empty_and_misshapen_batches(self):
        with self.assertRaises(BackendError):
            grad_jfb(self.op, np.zeros((0, 1)), Grid(N=4))
        with self.assertRaises(BackendError):
            grad_jfb(self.op, np.zeros((2, 3)), Grid(N=4))

    def test_failing_sample_is_named(self):
        batch = np.array([[0.5], [np.inf]])
        with np.errstate(all="ignore"), self.assertRaises(BackendError) as ctx:
            grad_jfb(self.op, batch, Grid(N=4))
        self.assertEqual(ctx.exception.sample, 1)
        self.assertIn("sample 1", str(ctx.exception))

    def test_parallel_reduction_is_deterministic(self):
        batch = self.problem.sample_states(13, 4)
        serial = grad_jfb(self.op, batch, Grid(N=6))
        parallel = grad_jfb(self.op, batch, Grid(N=6), GradientConfig(n_jobs=2))
        assert_array_equal(serial.direction, parallel.direction)
        self.assertEqual(serial.work_units, parallel.work_units)


@skipUnless(settings.JFB_SLOW_TESTS, "set JFB_SLOW_TESTS=1 for acceptance-size runs")
class AcceptanceTests(SimpleTestCase):
    def test_implicit_and_unrolled_agree_on_single_quadrotor(self):
        problem = make_problem("quadrotor")
        net = random_net(problem.n, seed=14, hidden=16, scale=0.3)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=2.0, tol=1e-10, max_iter=1000))
        batch = problem.sample_states(14, 4)
        implicit = grad_implicit(op, batch, Grid(N=20))
        unrolled = grad_unrolled(op, batch, Grid(N=20))
        self.assertGreater(cosine(implicit.direction, unrolled.direction), 0.999)
        self.assertLess(rel_err(implicit.direction, unrolled.direction), 1e-3)
