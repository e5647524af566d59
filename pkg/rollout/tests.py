import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose
from pydantic import ValidationError

from hamiltonian import HamiltonianOperator, OperatorConfig
from problems import ControlProblem, make_problem
from rollout import Grid, RolloutError, UntrackedTrajectoryError, discrete_adjoint, rollout
from tape import Tape, TapeError, ops
from valuenet import ValueNetwork


class StaticProblem(ControlProblem):
    """f = 0, L = u^2/2 - u, G = w z^2/2."""

    name = "static"
    state_per_agent = 1
    control_per_agent = 1

    def __init__(self, horizon=1.0, terminal_weight=0.0):
        super().__init__(1, horizon)
        self.w = terminal_weight

    def dynamics(self, t, z, u):
        return 0.0 * z

    def running_cost(self, t, z, u):
        return 0.5 * ops.sum(u * u) - ops.sum(u)

    def terminal_cost(self, z):
        return (0.5 * self.w) * ops.dot(z, z)

    def grad_u_running_cost(self, t, z, u):
        return u - 1.0

    def grad_u_costate_dynamics(self, t, z, u, p):
        return 0.0 * p

    def sample(self, rng, size):
        return rng.uniform(-1, 1, size=(size, 1))


class IntegratorProblem(StaticProblem):
    """f = u, L = 0, G = z^2/2."""

    name = "integrator"

    def __init__(self):
        super().__init__(1.0, 1.0)

    def dynamics(self, t, z, u):
        return 1.0 * u

    def running_cost(self, t, z, u):
        return 0.0 * ops.sum(u)

    def grad_u_running_cost(self, t, z, u):
        return 0.0 * u

    def grad_u_costate_dynamics(self, t, z, u, p):
        return 1.0 * p


class DriftProblem(StaticProblem):
    """f = 1."""

    name = "drift"

    def dynamics(self, t, z, u):
        return np.ones(1) + 0.0 * z


class ExplodingProblem(StaticProblem):
    name = "exploding"

    def dynamics(self, t, z, u):
        return z * np.inf


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


class GridTests(SimpleTestCase):
    def test_spacing(self):
        grid = Grid(N=4, T=2.0)
        self.assertEqual(grid.dt, 0.5)
        assert_allclose(grid.times(), [0.0, 0.5, 1.0, 1.5, 2.0])

    def test_validation(self):
        for bad in ({"N": 0}, {"T": 0.0}, {"integrator": "midpoint"}, {"steps": 3}):
            with self.subTest(bad=bad), self.assertRaises(ValidationError):
                Grid(**bad)

    def test_horizon_must_match_problem(self):
        op = HamiltonianOperator(StaticProblem(horizon=2.0), zero_net(1))
        with self.assertRaises(ValueError):
            rollout(op, op.value_fn.theta, np.zeros(1), Grid(N=4, T=1.0))


class ForwardTests(SimpleTestCase):
    def test_static_problem_repeats_the_same_control(self):
        op = HamiltonianOperator(StaticProblem(), zero_net(1), OperatorConfig(eta=1.0))
        traj = rollout(op, op.value_fn.theta, np.array([0.3]), Grid(N=10))
        assert_allclose(traj.controls, np.ones((10, 1)))
        self.assertAlmostEqual(traj.objective, 1.0 * (0.5 - 1.0))
        assert_allclose(traj.states, 0.3)

    def test_single_euler_step(self):
        op = HamiltonianOperator(DriftProblem(horizon=0.1), zero_net(1), OperatorConfig(eta=1.0))
        traj = rollout(op, op.value_fn.theta, np.zeros(1), Grid(N=1, T=0.1))
        assert_allclose(traj.states[1], [0.1])

    def test_riccati_value_recovers_optimal_cost(self):
        problem = scalar_lqr()
        value = problem.optimal_value(200)
        op = HamiltonianOperator(problem, value, OperatorConfig(eta=1.0))
        traj = rollout(op, value.theta, np.array([1.0]), Grid(N=200))
        self.assertAlmostEqual(traj.objective, 0.25, delta=0.0025)
        self.assertAlmostEqual(traj.objective, problem.riccati(200).cost([1.0]), places=9)

    def test_zero_initial_state_costs_nothing_under_riccati_policy(self):
        problem = scalar_lqr(Q=[[1.0]])
        value = problem.optimal_value(50)
        op = HamiltonianOperator(problem, value, OperatorConfig(eta=1.0))
        self.assertEqual(rollout(op, value.theta, np.zeros(1), Grid(N=50)).objective, 0.0)

    def test_euler_objective_converges_at_first_order(self):
        problem = scalar_lqr(A=[[-0.5]], Q=[[1.0]])
        net = random_net(1, seed=3)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=1.0))
        x = np.array([0.9])
        J = [rollout(op, net.theta, x, Grid(N=N)).objective for N in (50, 100, 200)]
        ratio = (J[0] - J[1]) / (J[1] - J[2])
        self.assertGreater(ratio, 1.6)
        self.assertLess(ratio, 2.4)

    def test_rk4_is_more_accurate_than_euler(self):
        problem = scalar_lqr(A=[[-0.5]], Q=[[1.0]])
        net = random_net(1, seed=3)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=1.0))
        x = np.array([0.9])
        reference = rollout(op, net.theta, x, Grid(N=400, integrator="rk4")).objective
        euler = rollout(op, net.theta, x, Grid(N=20)).objective
        rk4 = rollout(op, net.theta, x, Grid(N=20, integrator="rk4")).objective
        self.assertLess(abs(rk4 - reference), 0.1 * abs(euler - reference))
        self.assertEqual(len(rollout(op, net.theta, x, Grid(N=20, integrator="rk4")).iterations), 80)

    def test_non_finite_state(self):
        op = HamiltonianOperator(ExplodingProblem(), zero_net(1), OperatorConfig(eta=1.0))
        with np.errstate(invalid="ignore"), self.assertRaises(RolloutError) as ctx:
            rollout(op, op.value_fn.theta, np.array([1.0]), Grid(N=5))
        self.assertEqual(ctx.exception.k, 1)

    def test_tracked_mode_needs_tape(self):
        op = HamiltonianOperator(StaticProblem(), zero_net(1))
        with self.assertRaises(TapeError):
            rollout(op, op.value_fn.theta, np.zeros(1), Grid(N=2), track_mode="jfb")

    def test_tracked_modes_agree_on_objective(self):
        problem = scalar_lqr(Q=[[1.0]], R=[[2.0]])
        net = random_net(1, seed=6)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.4, tol=1e-12, max_iter=400))
        x = np.array([0.6])
        plain = rollout(op, net.theta, x, Grid(N=20)).objective
        for mode in ("jfb", "unrolled", "implicit"):
            with self.subTest(mode=mode), Tape():
                traj = rollout(op, net.theta, x, Grid(N=20), track_mode=mode)
                self.assertAlmostEqual(traj.objective, plain, places=10)
                self.assertEqual(len(traj.theta_nodes), 20)

    def test_multi_agent_quadrotor_tracks(self):
        problem = make_problem("quadrotor", agents=2, params={"c_int": 1.0})
        net = random_net(problem.n, seed=2, hidden=8, scale=0.3)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=2.0, tol=1e-8))
        x = problem.sample_states(0, 1)[0]
        with Tape():
            traj = rollout(op, net.theta, x, Grid(N=5), track_mode="jfb")
            adjoint = discrete_adjoint(traj)
        self.assertTrue(np.isfinite(traj.objective))
        self.assertTrue(np.all(np.isfinite(adjoint.gradient)))
        self.assertEqual(adjoint.control_cotangents.shape, (5, 8))

    def test_rows(self):
        op = HamiltonianOperator(scalar_lqr(), zero_net(1))
        rows = rollout(op, op.value_fn.theta, np.array([0.5]), Grid(N=3)).to_rows()
        self.assertEqual(len(rows), 4)
        self.assertEqual(list(rows[0]), ["k", "t", "z0", "u0", "L"])
        self.assertEqual(rows[-1]["u0"], "")
        self.assertEqual(rows[-1]["k"], 3)


class AdjointTests(SimpleTestCase):
    def test_untracked_trajectory(self):
        op = HamiltonianOperator(StaticProblem(), zero_net(1))
        traj = rollout(op, op.value_fn.theta, np.zeros(1), Grid(N=2))
        with self.assertRaises(UntrackedTrajectoryError):
            discrete_adjoint(traj)

    def test_constant_adjoint_without_dynamics(self):
        op = HamiltonianOperator(StaticProblem(terminal_weight=1.0), zero_net(1), OperatorConfig(eta=1.0))
        with Tape():
            traj = rollout(op, op.value_fn.theta, np.array([0.7]), Grid(N=5), track_mode="jfb")
            adjoint = discrete_adjoint(traj)
        assert_allclose(adjoint.adjoints, np.full((6, 1), 0.7))
        self.assertEqual(len(traj.to_rows()[0]), 6)

    def test_integrator_cotangents(self):
        op = HamiltonianOperator(IntegratorProblem(), zero_net(1), OperatorConfig(eta=0.5))
        with Tape():
            traj = rollout(op, op.value_fn.theta, np.array([0.7]), Grid(N=4), track_mode="jfb", detach_z=True)
            adjoint = discrete_adjoint(traj)
        assert_allclose(adjoint.control_cotangents, np.full((4, 1), 0.25 * 0.7))
        assert_allclose(adjoint.adjoints, 0.7)

    def test_one_step_cotangent(self):
        problem = scalar_lqr(R=[[1.5]], Q_T=[[2.0]])
        net = random_net(1, seed=1)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.3, tol=1e-12, max_iter=500))
        with Tape():
            traj = rollout(op, net.theta, np.array([0.4]), Grid(N=1), track_mode="jfb")
            adjoint = discrete_adjoint(traj)
        u0, z1 = traj.controls[0], traj.states[1]
        assert_allclose(adjoint.control_cotangents[0], 1.0 * (1.5 * u0 + 1.0 * 2.0 * z1), rtol=1e-12)

    def test_terminal_adjoint_is_terminal_gradient(self):
        problem = make_problem("lqr", params={
            "A": [[0.0, 1.0], [-1.0, 0.0]], "B": [[0.0], [1.0]], "Q": np.eye(2).tolist(),
            "R": [[1.0]], "Q_T": [[2.0, 0.5], [0.5, 1.0]],
        })
        net = random_net(2, seed=4)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.5, tol=1e-10))
        with Tape():
            traj = rollout(op, net.theta, np.array([0.5, -0.2]), Grid(N=10), track_mode="jfb")
            adjoint = discrete_adjoint(traj)
        assert_allclose(adjoint.adjoints[-1], problem.Q_T @ traj.states[-1], rtol=1e-12)

    def test_detached_adjoint_follows_euler_recursion(self):
        a, q = -0.3, 0.8
        problem = scalar_lqr(A=[[a]], Q=[[q]])
        net = random_net(1, seed=9)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=1.0))
        grid = Grid(N=8)
        with Tape():
            traj = rollout(op, net.theta, np.array([0.8]), grid, track_mode="jfb", detach_z=True)
            adjoint = discrete_adjoint(traj)
        p, z, dt = adjoint.adjoints[:, 0], traj.states[:, 0], grid.dt
        for k in range(grid.N):
            self.assertAlmostEqual(p[k], p[k + 1] * (1 + dt * a) + dt * q * z[k], places=12)

    def test_cotangent_matches_injected_perturbation(self):
        problem = scalar_lqr(Q=[[1.0]], A=[[0.2]])
        net = random_net(1, seed=5)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=1.0))
        grid = Grid(N=10)
        x = np.array([0.8])
        with Tape():
            traj = rollout(op, net.theta, x, grid, track_mode="implicit")
            adjoint = discrete_adjoint(traj)
        step = 1e-6
        for k in (0, 4, 9):
            offsets = np.zeros((grid.N, 1))
            offsets[k] = step
            up = rollout(op, net.theta, x, grid, control_offsets=offsets).objective
            down = rollout(op, net.theta, x, grid, control_offsets=-offsets).objective
            with self.subTest(k=k):
                assert_allclose(adjoint.control_cotangents[k, 0], (up - down) / (2 * step), rtol=1e-6, atol=1e-8)

    def test_step_gradients_sum_to_total(self):
        problem = scalar_lqr(Q=[[1.0]])
        net = random_net(1, seed=7)
        op = HamiltonianOperator(problem, net, OperatorConfig(eta=0.5, tol=1e-10))
        with Tape():
            traj = rollout(op, net.theta, np.array([0.5]), Grid(N=6), track_mode="jfb")
            adjoint = discrete_adjoint(traj)
        self.assertEqual(adjoint.theta_grads.shape, (6, net.num_params))
        assert_allclose(adjoint.gradient, adjoint.theta_grads.sum(axis=0))
        self.assertTrue(np.any(adjoint.theta_grads != 0))
