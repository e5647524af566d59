import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from problems import (
    BicycleParams,
    ConsumptionParams,
    DomainError,
    LQRParams,
    NotPositiveDefiniteError,
    QuadrotorParams,
    UnknownProblemError,
    consumption_foc_residual,
    lqr_riccati,
    make_problem,
)
from tape import Tape


def fd_grad(fn, x, step=1e-6):
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        grad[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return grad


def admissible_point(problem, rng):
    z = problem.sample(rng, 1)[0]
    if problem.name == "quadrotor":
        z = z + rng.uniform(-0.3, 0.3, problem.n)
        u = rng.uniform(-1, 1, problem.m)
    elif problem.name == "bicycle":
        u = rng.uniform(-1, 1, problem.m)
    elif problem.name == "consumption":
        u = problem.initial_control(z) + rng.uniform(-0.3, 0.3, problem.m)
    else:
        z = z + rng.uniform(-1, 1, problem.n)
        u = rng.uniform(-1, 1, problem.m)
    return z, u


class RiccatiTests(SimpleTestCase):
    def test_scalar_value_matches_continuous_solution(self):
        sol = lqr_riccati([[0.0]], [[1.0]], [[0.0]], [[1.0]], [[1.0]], T=1.0, N=1000)
        self.assertAlmostEqual(sol.cost([1.0]), 0.25, delta=0.25e-3)

    def test_no_input_means_no_gain(self):
        A = [[0.1, 1.0], [0.0, -0.2]]
        Q = np.eye(2)
        sol = lqr_riccati(A, np.zeros((2, 1)), Q, [[1.0]], np.eye(2), T=1.0, N=10)
        assert_allclose(sol.gains, 0.0)
        Ad = np.eye(2) + 0.1 * np.asarray(A)
        assert_allclose(sol.values[9], 0.1 * Q + Ad.T @ np.eye(2) @ Ad, atol=1e-14)

    def test_zero_costs(self):
        sol = lqr_riccati([[1.0]], [[2.0]], [[0.0]], [[1.0]], [[0.0]], T=1.0, N=20)
        assert_allclose(sol.values, 0.0)
        self.assertEqual(sol.cost([3.0]), 0.0)

    def test_values_are_symmetric_psd(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(3, 3))
        B = rng.normal(size=(3, 2))
        sol = lqr_riccati(A, B, np.eye(3), np.eye(2), np.eye(3), T=1.0, N=50)
        for P in sol.values:
            assert_allclose(P, P.T, atol=1e-12)
            self.assertGreaterEqual(np.linalg.eigvalsh(P).min(), -1e-12)

    def test_rejects_indefinite_input_cost(self):
        with self.assertRaises(NotPositiveDefiniteError):
            lqr_riccati([[0.0]], [[1.0]], [[0.0]], [[-1.0]], [[1.0]], T=1.0, N=10)
        with self.assertRaises(NotPositiveDefiniteError):
            make_problem("lqr", params={"R": [[0.0]]})

    def test_rejects_indefinite_state_costs(self):
        indefinite = [[1.0, 0.0], [0.0, -0.5]]
        with self.assertRaises(NotPositiveDefiniteError) as ctx:
            lqr_riccati(np.zeros((2, 2)), np.eye(2), indefinite, np.eye(2), np.eye(2), T=1.0, N=10)
        self.assertIn("Q", str(ctx.exception))
        with self.assertRaises(NotPositiveDefiniteError) as ctx:
            make_problem("lqr", params={"Q_T": [[-1.0]]})
        self.assertIn("Q_T", str(ctx.exception))
        with self.assertRaises(NotPositiveDefiniteError):
            make_problem("lqr", params={"A": [[0.0, 0.0], [0.0, 0.0]], "B": [[1.0], [0.0]],
                                        "Q": [[1.0, 1.0], [0.0, 1.0]], "Q_T": np.eye(2).tolist()})

    def test_semidefinite_state_costs_are_accepted(self):
        problem = make_problem("lqr", params={"Q": [[0.0]], "Q_T": [[0.0]]})
        self.assertEqual(problem.riccati(5).cost([1.0]), 0.0)


class ConsumptionResidualTests(SimpleTestCase):
    def test_closed_form_without_habit_growth(self):
        params = ConsumptionParams(A=0.0, delta=0.0, gamma_crra=2.0)
        r = consumption_foc_residual(params, 0.3, 1.0, np.zeros(1), np.array([0.5]), 4.0, np.zeros(1))
        assert_allclose(r, [0.0], atol=1e-12)

    def test_zero_habit_costate(self):
        params = ConsumptionParams()
        t, h, u = 0.2, np.array([0.1]), np.array([0.6])
        r = consumption_foc_residual(params, t, 1.0, h, u, 1.5, np.zeros(1))
        assert_allclose(r, np.exp(-0.05 * t) * (u - h) ** -2.0 - 1.5)

    def test_blows_up_near_habit(self):
        params = ConsumptionParams()
        near = consumption_foc_residual(params, 0.0, 1.0, np.array([0.2]), np.array([0.2 + 1e-6]), 1.0, np.ones(1))
        self.assertGreater(near[0], 1e10)

    def test_domain_violation(self):
        with self.assertRaises(DomainError):
            consumption_foc_residual(ConsumptionParams(), 0.0, 1.0, np.array([0.3]), np.array([0.3]), 1.0, np.ones(1))

    def test_rejects_log_utility(self):
        with self.assertRaises(ValueError):
            ConsumptionParams(gamma_crra=1.0)

    def test_cost_form_is_negated_economic_form(self):
        problem = make_problem("consumption", params={"m": 2, "A": [0.5, 0.2]})
        rng = np.random.default_rng(4)
        z, u = admissible_point(problem, rng)
        p = rng.normal(size=problem.n)
        residual = problem.control_residual(0.4, z, u, p)
        economic = consumption_foc_residual(problem.params, 0.4, z[0], z[1:], u, -p[0], -p[1:])
        assert_allclose(residual, -economic, rtol=1e-12)


class RegistryTests(SimpleTestCase):
    def test_dimensions(self):
        quad = make_problem("quadrotor", agents=100)
        self.assertEqual((quad.n, quad.m), (1200, 400))
        bike = make_problem("bicycle", agents=100)
        self.assertEqual((bike.n, bike.m), (400, 200))
        lqr = make_problem("lqr")
        self.assertEqual((lqr.n, lqr.m), (1, 1))
        cons = make_problem("consumption", agents=100)
        self.assertEqual((cons.n, cons.m), (200, 100))

    def test_unknown_name(self):
        with self.assertRaises(UnknownProblemError):
            make_problem("pendulum")

    def test_params_as_model_or_dict(self):
        a = make_problem("quadrotor", params=QuadrotorParams(c_T=5.0))
        b = make_problem("quadrotor", params={"c_T": 5.0})
        self.assertEqual(a.params, b.params)

    def test_sampling_is_seeded(self):
        problem = make_problem("bicycle", agents=3)
        assert_allclose(problem.sample_states(5, 4), problem.sample_states(5, 4), rtol=0, atol=0)
        self.assertEqual(problem.sample_states(5, 4).shape, (4, 12))

    def test_default_initial_distributions(self):
        states = make_problem("consumption", agents=2).sample_states(0, 50).reshape(50, 2, 2)
        self.assertTrue(np.all((states[:, :, 0] >= 1.0) & (states[:, :, 0] <= 2.0)))
        self.assertTrue(np.all((states[:, :, 1] >= 0.1) & (states[:, :, 1] <= 0.3)))
        quad = make_problem("quadrotor").sample_states(0, 20)
        assert_allclose(quad[:, 3:], 0.0)


class DerivativeTests(SimpleTestCase):
    """Tape derivatives of f, L, G and the hand-written control gradients."""

    problems = [
        ("lqr", {"A": [[0.2, 1.0], [-0.5, 0.0]], "B": [[0.0], [1.0]], "Q": [[1.0, 0.0], [0.0, 2.0]],
                 "R": [[0.5]], "Q_T": [[3.0, 0.0], [0.0, 1.0]]}),
        ("quadrotor", {"c_int": 0.7}),
        ("bicycle", {"c_int": 0.3}),
        ("consumption", {"m": 2, "A": [0.5, 0.4], "B": [0.3, 0.1]}),
    ]

    def check_problem(self, problem, z0, u0, t=0.3):
        rng = np.random.default_rng(11)
        c = rng.normal(size=problem.n)
        with Tape() as tape:
            z = tape.variable(z0)
            u = tape.variable(u0)
            f = problem.dynamics(t, z, u)
            grads_f = tape.vjp(f, [z, u], c)
            running = problem.running_cost(t, z, u)
            grads_L = tape.vjp(running, [z, u])
            grads_G = tape.vjp(problem.terminal_cost(z), [z])

        def fz(x):
            return c @ problem.dynamics(t, x, u0)

        def fu(v):
            return c @ problem.dynamics(t, z0, v)

        assert_allclose(grads_f[z], fd_grad(fz, z0), rtol=1e-6, atol=1e-7)
        assert_allclose(grads_f[u], fd_grad(fu, u0), rtol=1e-6, atol=1e-7)
        assert_allclose(grads_L[z], fd_grad(lambda x: problem.running_cost(t, x, u0), z0), rtol=1e-6, atol=1e-7)
        assert_allclose(grads_L[u], fd_grad(lambda v: problem.running_cost(t, z0, v), u0), rtol=1e-6, atol=1e-7)
        assert_allclose(grads_G[z], fd_grad(problem.terminal_cost, z0), rtol=1e-6, atol=1e-7)

        assert_allclose(problem.grad_u_running_cost(t, z0, u0), grads_L[u], rtol=1e-10, atol=1e-12)
        assert_allclose(problem.grad_u_costate_dynamics(t, z0, u0, c), grads_f[u], rtol=1e-10, atol=1e-12)

    def test_finite_differences_at_random_admissible_points(self):
        for index, (name, params) in enumerate(self.problems):
            problem = make_problem(name, agents=2, params=params)
            rng = np.random.default_rng(100 + index)
            for _ in range(50):
                z0, u0 = admissible_point(problem, rng)
                with self.subTest(problem=name):
                    self.check_problem(problem, z0, u0)

    def test_agents_are_decoupled_without_interaction(self):
        for name in ("quadrotor", "bicycle", "consumption"):
            problem = make_problem(name, agents=3)
            z0, u0 = admissible_point(problem, np.random.default_rng(1))
            bumped = u0.copy()
            bumped[: problem.control_per_agent] += 0.05
            before = problem.dynamics(0.0, z0, u0)
            after = problem.dynamics(0.0, z0, bumped)
            k = problem.state_per_agent
            with self.subTest(problem=name):
                self.assertTrue(np.array_equal(before[k:], after[k:]))
                self.assertFalse(np.array_equal(before[:k], after[:k]))

    def test_wealth_dynamics_are_affine(self):
        problem = make_problem("consumption")
        z0, u0 = admissible_point(problem, np.random.default_rng(2))
        dz = np.array([0.3, 0.0])
        du = np.array([0.0])
        second = (
            problem.dynamics(0.0, z0 + dz, u0 + du)[0]
            - 2 * problem.dynamics(0.0, z0, u0)[0]
            + problem.dynamics(0.0, z0 - dz, u0 - du)[0]
        )
        self.assertAlmostEqual(second, 0.0, delta=1e-12)
        for du in (np.array([0.05]), np.array([-0.05])):
            self.assertAlmostEqual(
                problem.dynamics(0.0, z0, u0 + du)[0] - problem.dynamics(0.0, z0, u0)[0],
                -du[0],
                delta=1e-12,
            )


class DomainTests(SimpleTestCase):
    def test_lqr_exact_maximizer(self):
        problem = make_problem("lqr", params=LQRParams(B=[[2.0]], R=[[4.0]]))
        assert_allclose(problem.exact_maximizer(0.0, np.zeros(1), np.array([3.0])), [-1.5])

    def test_bicycle_steering_is_clamped(self):
        problem = make_problem("bicycle", params=BicycleParams(steer_max=1.2), agents=2)
        u = np.array([5.0, 2.0, -5.0, -2.0])
        assert_allclose(problem.project(np.zeros(8), u), [5.0, 1.2, -5.0, -1.2])

    def test_consumption_projection_and_admissibility(self):
        problem = make_problem("consumption")
        z = np.array([1.5, 0.2])
        assert_allclose(problem.project(z, np.array([0.1])), [0.2 + 1e-4])
        assert_allclose(problem.initial_control(z), [0.7])
        with self.assertRaises(DomainError):
            problem.check_admissible(z, np.array([0.2]))
        problem.check_admissible(z, np.array([0.21]))

    def test_quadrotor_hovers_at_zero_control(self):
        problem = make_problem("quadrotor", agents=2)
        f = problem.dynamics(0.0, np.zeros(24), np.zeros(8))
        assert_allclose(f, 0.0, atol=1e-14)

    def test_interaction_couples_agents(self):
        problem = make_problem("bicycle", agents=2, params={"c_int": 1.0, "c_z": 0.0, "c_u": 0.0})
        z = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        self.assertAlmostEqual(float(problem.running_cost(0.0, z, np.zeros(4))), 1.0)
        apart = z.copy()
        apart[4] = 10.0
        self.assertLess(float(problem.running_cost(0.0, apart, np.zeros(4))), 1e-10)
