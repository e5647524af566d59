import tempfile
from pathlib import Path
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from numpy.testing import assert_allclose
from pydantic import ValidationError

from hamiltonian import HamiltonianOperator, OperatorConfig
from problems import make_problem
from rollout import Grid
from trainer import (
    ControlObjective,
    NonFiniteDirection,
    QuadraticObjective,
    Schedule,
    StepEstimate,
    TrainConfig,
    neighborhood_experiment,
    plateaus_monotone,
    sgd_step,
    train,
)
from valuenet import ValueNetwork


class FixedDirection:
    """Returns the same direction and loss every call; NaN at the listed calls."""

    horizon = 1.0

    def __init__(self, direction, loss=1.0, bad=()):
        self.direction = np.asarray(direction, dtype=np.float64)
        self.theta = np.zeros_like(self.direction)
        self.loss_value = loss
        self.bad = set(bad)
        self.calls = 0

    def set_theta(self, theta):
        self.theta = np.array(theta)

    def sample_batch(self, rng, size):
        return rng.standard_normal((size, 1))

    def step(self, theta, batch, with_true_grad=False):
        call = self.calls
        self.calls += 1
        d = np.full_like(self.direction, np.nan) if call in self.bad else self.direction
        return StepEstimate(loss=self.loss_value, direction=d)

    def audit(self, theta, batch, seed=0):
        return None


def scalar_lqr_objective(seed=0, eta=1.0, N=10):
    problem = make_problem("lqr", params={"A": [[0.0]], "B": [[1.0]], "Q": [[0.0]], "R": [[1.0]], "Q_T": [[1.0]]})
    net = ValueNetwork(1, widths=[2, 6, 1], seed=seed)
    net.set_theta(np.random.default_rng(seed).uniform(-0.5, 0.5, net.num_params))
    op = HamiltonianOperator(problem, net, OperatorConfig(eta=eta, tol=1e-10))
    return problem, ControlObjective(op, Grid(N=N))


class ScheduleTests(SimpleTestCase):
    def test_diminishing_sequence(self):
        schedule = Schedule(kind="diminishing", alpha0=0.1, power=1.0)
        assert_allclose([schedule.alpha(j) for j in range(3)], [0.1, 0.05, 0.1 / 3])

    def test_power_must_keep_sums_right(self):
        for power in (0.5, 0.3, 1.2):
            with self.subTest(power=power), self.assertRaises(ValidationError):
                Schedule(kind="diminishing", power=power)
        Schedule(kind="diminishing", power=0.75)
        Schedule(kind="constant", power=0.3)

    def test_plateau_fields(self):
        for bad in ({"factor": 1.0}, {"factor": 0.0}, {"patience": 0}, {"alpha0": 0.0}):
            with self.subTest(**bad), self.assertRaises(ValidationError):
                Schedule(kind="plateau", **bad)

    def test_plateau_reduces_after_patience(self):
        sizer = Schedule(kind="plateau", alpha0=0.1, factor=0.5, patience=2).start()
        events = [sizer.end_epoch(e, 1.0) for e in range(4)]
        self.assertEqual(events[:3], [None, None, None])
        self.assertEqual(events[3], "reduce:0.1->0.05")
        self.assertEqual(sizer.alpha(100), 0.05)

    def test_improvement_resets_patience(self):
        sizer = Schedule(kind="plateau", alpha0=0.1, patience=1).start()
        for epoch, loss in enumerate([1.0, 1.0, 0.5, 0.5]):
            self.assertIsNone(sizer.end_epoch(epoch, loss))
        self.assertEqual(sizer.alpha(0), 0.1)

    def test_negative_losses_improve_downwards(self):
        sizer = Schedule(kind="plateau", patience=1).start()
        sizer.end_epoch(0, -1.0)
        sizer.end_epoch(1, -1.5)
        self.assertEqual(sizer.best, -1.5)
        self.assertEqual(sizer.bad_epochs, 0)

    def test_floor(self):
        sizer = Schedule(kind="plateau", alpha0=0.1, patience=1, min_alpha=0.08).start()
        for epoch in range(6):
            sizer.end_epoch(epoch, 1.0)
        self.assertEqual(sizer.alpha(0), 0.08)


class SgdStepTests(SimpleTestCase):
    def test_zero_direction_leaves_theta(self):
        theta = np.array([1.0, -2.0])
        assert_allclose(sgd_step(theta, np.zeros(2), 0.3), theta)

    def test_quadratic_contracts_by_one_minus_alpha(self):
        theta = np.array([3.0, 4.0])
        for _ in range(3):
            norm = np.linalg.norm(theta)
            theta = sgd_step(theta, theta, 0.1)
            self.assertAlmostEqual(np.linalg.norm(theta), 0.9 * norm)

    def test_zero_step_keeps_loss(self):
        objective = QuadraticObjective(center=[1.0, 1.0], theta0=[0.5, 2.0])
        losses = []
        for _ in range(2):
            est = objective.step(objective.theta, np.zeros((1, 2)))
            losses.append(est.loss)
            sgd_step(objective, est.direction, 0.0)
        self.assertEqual(losses[0], losses[1])

    def test_updates_objects_in_place(self):
        objective = QuadraticObjective(center=[0.0], theta0=[2.0])
        new = sgd_step(objective, np.array([1.0]), 0.5)
        assert_allclose(new, [1.5])
        assert_allclose(objective.theta, [1.5])

    def test_rejects_bad_directions(self):
        with self.assertRaises(NonFiniteDirection):
            sgd_step(np.zeros(2), np.array([np.nan, 0.0]), 0.1)
        with self.assertRaises(ValueError):
            sgd_step(np.zeros(2), np.zeros(3), 0.1)
        with self.assertRaises(ValueError):
            sgd_step(np.zeros(2), np.zeros(2), -0.1)


class TrainHistoryTests(SimpleTestCase):
    def test_constant_norms_give_constant_cesaro(self):
        history = train(FixedDirection([3.0, 4.0]), Schedule(alpha0=0.1), TrainConfig(epochs=2, iters_per_epoch=10))
        self.assertEqual(len(history.records), 20)
        assert_allclose(history.cesaro, 25.0, rtol=1e-12)

    def test_cesaro_recomputes_from_records(self):
        objective = QuadraticObjective(center=np.ones(3), bias=[0.1, 0.0, 0.0], noise=0.5)
        history = train(objective, Schedule(alpha0=0.2), TrainConfig(batch_size=4, epochs=3, iters_per_epoch=20))
        assert_allclose(history.recompute_cesaro(), history.cesaro, rtol=1e-12)
        self.assertTrue(np.all(np.diff(history.A) > 0))
        self.assertTrue(np.all(np.diff(history.liminf_proxy) <= 0))

    def test_same_seed_same_history(self):
        def run(seed):
            objective = QuadraticObjective(center=np.ones(3), noise=0.5)
            return train(objective, Schedule(alpha0=0.2), TrainConfig(batch_size=2, epochs=1, iters_per_epoch=15, seed=seed))

        self.assertEqual(run(3).to_rows(), run(3).to_rows())
        self.assertNotEqual(run(3).to_rows(), run(4).to_rows())

    def test_sample_index_follows_step_sizes(self):
        history = train(FixedDirection([1.0]), Schedule(alpha0=0.1), TrainConfig(epochs=1, iters_per_epoch=3))
        rng = np.random.default_rng(0)
        draws = np.array([history.sample_index(rng) for _ in range(20000)])
        self.assertTrue(set(draws) <= {0, 1, 2})
        self.assertAlmostEqual(np.mean(draws == 0), 0.1 / (0.1 + 0.05 + 0.1 / 3), delta=0.02)

    def test_plateau_schedule_reduces_on_stalled_loss(self):
        schedule = Schedule(kind="plateau", alpha0=0.1, factor=0.5, patience=1)
        history = train(FixedDirection([1.0]), schedule, TrainConfig(epochs=4, iters_per_epoch=2))
        self.assertEqual(history.records[5].lr_events, ["reduce:0.1->0.05"])
        self.assertEqual(history.records[6].alpha, 0.05)
        self.assertEqual(history.to_rows()[5]["lr_events"], "reduce:0.1->0.05")

    def test_non_finite_direction_is_skipped(self):
        history = train(FixedDirection([1.0], bad={2}), Schedule(alpha0=0.1), TrainConfig(epochs=1, iters_per_epoch=5))
        self.assertEqual([r.j for r in history.records], [0, 1, 3, 4])
        self.assertEqual([i.j for i in history.incidents], [2])

    def test_non_finite_direction_can_abort(self):
        cfg = TrainConfig(epochs=1, iters_per_epoch=5, skip_nonfinite=False)
        with self.assertRaises(NonFiniteDirection) as ctx:
            train(FixedDirection([1.0], bad={2}), Schedule(alpha0=0.1), cfg)
        self.assertEqual(ctx.exception.j, 2)

    def test_divergence_stops_the_run(self):
        objective = QuadraticObjective(center=[1.0])
        cfg = TrainConfig(epochs=5, iters_per_epoch=10, divergence_factor=10.0)
        history = train(objective, Schedule(kind="constant", alpha0=2.5), cfg)
        self.assertTrue(history.diverged)
        self.assertEqual(len(history.records), 10)

    def test_audits_measure_descent_and_lipschitz(self):
        objective = QuadraticObjective(center=[1.0, -2.0], curvature=0.5 * np.eye(2))
        cfg = TrainConfig(epochs=1, iters_per_epoch=10, audit_every=5)
        history = train(objective, Schedule(kind="constant", alpha0=0.1), cfg)
        self.assertEqual([a.j for a in history.audits], [0, 5])
        self.assertAlmostEqual(history.lipschitz_hat, 0.5)
        self.assertEqual(history.descent_fraction, 1.0)
        for snapshot in history.audits:
            self.assertIsNone(snapshot.report)
            self.assertAlmostEqual(snapshot.epsilon_v, 1.0)
        self.assertIsNotNone(history.records[0].grad_norm_true)
        self.assertIsNone(history.records[1].grad_norm_true)
        self.assertIsNone(history.step_cap)


class ControlObjectiveTests(SimpleTestCase):
    def test_exact_operator_direction_is_true_gradient(self):
        problem, objective = scalar_lqr_objective(seed=1)
        est = objective.step(objective.theta, problem.sample_states(0, 4), with_true_grad=True)
        assert_allclose(est.direction, est.true_grad, rtol=1e-10, atol=1e-14)
        self.assertEqual(est.work_units, 40)

    def test_true_gradient_limited_to_small_control_spaces(self):
        problem = make_problem("quadrotor", agents=17)
        op = HamiltonianOperator(problem, ValueNetwork(problem.n, widths=[1 + problem.n, 2, 1]))
        self.assertFalse(ControlObjective(op, Grid(N=2)).supports_true_grad)

    def test_training_lowers_holdout_cost_and_checkpoints(self):
        problem, objective = scalar_lqr_objective(seed=2)
        holdout = problem.sample_states(99, 64)
        before = objective.loss(objective.theta, holdout)
        with tempfile.TemporaryDirectory() as tmp:
            history = train(
                objective,
                Schedule(kind="constant", alpha0=0.05),
                TrainConfig(batch_size=16, epochs=2, iters_per_epoch=10, checkpoint_every=10),
                checkpoint_dir=tmp,
            )
            self.assertEqual([p.name for p in history.checkpoints], ["theta_000010.ckpt", "theta_000020.ckpt"])
            assert_allclose(ValueNetwork.load(Path(tmp) / "theta_000020.ckpt").theta, history.theta)
        self.assertLess(objective.loss(history.theta, holdout), before)
        assert_allclose(objective.theta, history.theta)

    def test_audit_reports_attach_to_history(self):
        problem, objective = scalar_lqr_objective(seed=3, eta=0.5)
        cfg = TrainConfig(batch_size=4, epochs=1, iters_per_epoch=4, audit_every=2)
        history = train(objective, Schedule(kind="constant", alpha0=0.01), cfg)
        self.assertEqual(len(history.audits), 2)
        report = history.audits[0].report
        self.assertAlmostEqual(report.gamma_hat, 0.5, delta=1e-8)
        self.assertTrue(report.pass_A1)
        self.assertIsNotNone(report.epsilon_v_hat)


class NeighborhoodTests(SimpleTestCase):
    def biased_quadratic(self):
        bias = np.zeros(10)
        bias[0] = 0.5
        # starts at the biased stationary point
        return QuadraticObjective(center=np.zeros(10), bias=bias, noise=1.0, theta0=-bias)

    def test_plateau_shrinks_with_step_size(self):
        rows = neighborhood_experiment(self.biased_quadratic(), [0.2, 0.1, 0.05, 1e-6], iterations=5000, batch_size=1)
        self.assertFalse(any(r.diverged for r in rows))
        plateaus = [r.plateau for r in rows]
        self.assertTrue(all(b < a for a, b in zip(plateaus, plateaus[1:])))
        self.assertTrue(plateaus_monotone(rows))
        # ||bias||^2 + 10 * alpha / (2 - alpha) in expectation
        self.assertAlmostEqual(plateaus[1], 0.25 + 1.0 / 1.9, delta=0.15)

    def test_divergent_runs_are_flagged_and_ignored(self):
        objective = QuadraticObjective(center=[1.0, 1.0])
        rows = neighborhood_experiment(objective, [2.5, 0.1], iterations=100, batch_size=1)
        self.assertTrue(rows[0].diverged)
        self.assertTrue(np.isnan(rows[0].plateau))
        self.assertFalse(rows[1].diverged)
        self.assertTrue(plateaus_monotone(rows))
        assert_allclose(objective.theta, [0.0, 0.0])

    def test_alphas_must_descend(self):
        with self.assertRaises(ValueError):
            neighborhood_experiment(QuadraticObjective(center=[0.0]), [0.1, 0.2], iterations=10)


@skipUnless(settings.JFB_SLOW_TESTS, "set JFB_SLOW_TESTS=1 for long training runs")
class ConvergenceAcceptanceTests(SimpleTestCase):
    def test_cesaro_average_falls_on_scalar_lqr(self):
        _, objective = scalar_lqr_objective(seed=5, N=20)
        cfg = TrainConfig(batch_size=16, epochs=40, iters_per_epoch=50)
        history = train(objective, Schedule(kind="diminishing", alpha0=0.1), cfg)
        cesaro = history.cesaro
        self.assertLess(cesaro[1999], cesaro[99])
        assert_allclose(history.recompute_cesaro(), cesaro, rtol=1e-12)
