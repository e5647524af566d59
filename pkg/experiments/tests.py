import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase

from grad import grad_jfb
from hamiltonian import HamiltonianOperator
from valuenet import ValueNetwork

from .artifacts import read_csv
from .config import ConfigError, loads
from .runs import RuntimeOptions, build, relative_gap, run_compare, run_oracle, run_train

SCALAR_LQR = """
name = "scalar"
seed = 3

[problem]
name = "lqr"
horizon = 1.0

[problem.params]
A = [[0.0]]
B = [[1.0]]
Q = [[0.0]]
R = [[1.0]]
Q_T = [[1.0]]

[net]
widths = [2, 6, 1]
seed = 0

[operator]
eta = 1.0
tol = 1e-10

[grid]
N = {N}
T = 1.0

[train]
batch_size = 4
epochs = 2
iters_per_epoch = 5
checkpoint_every = 5

[train.schedule]
kind = "diminishing"
alpha0 = 0.05

[output]
trajectory = true
"""


def scalar_config(N=10, extra=""):
    return SCALAR_LQR.format(N=N) + extra


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write_config(self, text, name="config.toml"):
        path = self.root / name
        path.write_text(text, encoding="utf-8")
        return path

    def call(self, command, **options):
        out = StringIO()
        call_command(command, stdout=out, **options)
        return out.getvalue()


class ConfigTests(SimpleTestCase):
    def test_round_trip_keeps_hash(self):
        config = loads(scalar_config())
        again = loads(config.dumps())
        self.assertEqual(again, config)
        self.assertEqual(again.config_hash, config.config_hash)

    def test_hash_follows_content(self):
        base = loads(scalar_config())
        self.assertNotEqual(base.config_hash, base.with_overrides(seed=4).config_hash)
        self.assertEqual(base.with_overrides(audit_every=2).train.audit_every, 2)

    def test_unknown_key_names_its_path(self):
        with self.assertRaises(ConfigError) as ctx:
            loads(scalar_config(extra="\n[compare]\nbogus = 1\n"))
        self.assertEqual(ctx.exception.path, "compare.bogus")

    def test_unknown_problem(self):
        text = scalar_config().replace('name = "lqr"', 'name = "pendulum"')
        with self.assertRaises(ConfigError) as ctx:
            loads(text)
        self.assertEqual(ctx.exception.path, "problem.name")

    def test_bad_problem_params(self):
        text = scalar_config().replace("R = [[1.0]]", "R = [[-1.0]]")
        with self.assertRaises(ConfigError) as ctx:
            loads(text)
        self.assertEqual(ctx.exception.path, "problem.params")

    def test_grid_must_match_horizon(self):
        text = scalar_config().replace("T = 1.0", "T = 2.0")
        with self.assertRaises(ConfigError) as ctx:
            loads(text)
        self.assertEqual(ctx.exception.path, "grid.T")

    def test_widths_must_match_state(self):
        text = scalar_config().replace("widths = [2, 6, 1]", "widths = [3, 6, 1]")
        with self.assertRaises(ConfigError) as ctx:
            loads(text)
        self.assertEqual(ctx.exception.path, "net.widths")

    def test_invalid_toml(self):
        with self.assertRaises(ConfigError):
            loads("[problem\nname=")

    def test_neighborhood_alphas_descend(self):
        with self.assertRaises(ConfigError) as ctx:
            loads(scalar_config(extra="\n[neighborhood]\nalphas = [0.01, 0.02]\n"))
        self.assertEqual(ctx.exception.path, "neighborhood.alphas")


class TrainCommandTests(CommandTestCase):
    def test_history_and_artifacts(self):
        config = self.write_config(scalar_config())
        out = self.root / "run"
        message = self.call("train", config=str(config), out=str(out))
        self.assertIn("10 iterations", message)

        header, rows = read_csv(out / "history.csv")
        self.assertEqual(len(rows), 10)
        self.assertEqual(header["config_hash"], loads(config.read_text()).config_hash)
        self.assertEqual(header["seed"], "3")
        self.assertEqual(header["kind"], "history")
        A = [float(row["A_K"]) for row in rows]
        self.assertTrue(all(b > a for a, b in zip(A, A[1:])))

        manifest = json.loads((out / "manifest.json").read_text())
        paths = {entry["path"] for entry in manifest["artifacts"]}
        self.assertIn("checkpoints/theta_000005.ckpt", paths)
        self.assertIn("theta_final.ckpt", paths)
        self.assertTrue((out / "trajectory.csv").exists())
        history = json.loads((out / "history.json").read_text())
        self.assertEqual(len(history["data"]["records"]), 10)

    def test_rerun_is_byte_identical(self):
        config = self.write_config(scalar_config())
        self.call("train", config=str(config), out=str(self.root / "a"))
        self.call("train", config=str(config), out=str(self.root / "b"))
        first = (self.root / "a" / "history.csv").read_bytes()
        second = (self.root / "b" / "history.csv").read_bytes()
        self.assertEqual(first, second)

    def test_seed_override_changes_header(self):
        config = self.write_config(scalar_config())
        self.call("train", config=str(config), out=str(self.root / "s"), seed_override=11)
        header, _ = read_csv(self.root / "s" / "history.csv")
        self.assertEqual(header["seed"], "11")

    def test_audits_write_diagnostics(self):
        config = self.write_config(scalar_config())
        self.call("train", config=str(config), out=str(self.root / "d"), audit_every=5)
        _, rows = read_csv(self.root / "d" / "diagnostics.csv")
        self.assertEqual(len(rows), 2)
        self.assertIn("gamma_hat", rows[0])
        self.assertIn("hjb_residual_hat", rows[0])
        self.assertEqual([row["epoch"] for row in rows], ["0", "1"])

        summary = json.loads((self.root / "d" / "manifest.json").read_text())["summary"]
        margins = [float(row["epsilon_v"]) for row in rows if row["epsilon_v"]]
        self.assertTrue(margins)
        self.assertAlmostEqual(summary["epsilon_v_hat_min"], min(margins))
        self.assertEqual(summary["problem"]["name"], "lqr")
        self.assertEqual(summary["problem"]["u_domain"], "free")
        self.assertEqual(summary["problem"]["n"], 1)

    def test_no_audits_leave_margin_empty(self):
        config = self.write_config(scalar_config())
        self.call("train", config=str(config), out=str(self.root / "n"))
        summary = json.loads((self.root / "n" / "manifest.json").read_text())["summary"]
        self.assertIsNone(summary["epsilon_v_hat_min"])

    def test_missing_problem_name_exits_2(self):
        config = self.write_config('[problem]\nagents = 1\n')
        with self.assertRaises(CommandError) as ctx:
            self.call("train", config=str(config), out=str(self.root / "x"))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn("problem.name", str(ctx.exception))

    def test_missing_config_file_exits_2(self):
        with self.assertRaises(CommandError) as ctx:
            self.call("train", config=str(self.root / "absent.toml"), out=str(self.root / "x"))
        self.assertEqual(ctx.exception.returncode, 2)


class DiagnoseCommandTests(CommandTestCase):
    def test_report_and_schema(self):
        config = self.write_config(scalar_config(extra="\n[diagnose]\nbatch = 4\npower_iters = 20\n"))
        out = self.root / "diag"
        self.call("diagnose", config=str(config), out=str(out))
        report = json.loads((out / "diagnostics.json").read_text())
        self.assertLess(report["data"]["gamma_hat"], 1.0)
        self.assertTrue((out / "diagnostics_schema.json").exists())

    def test_checkpoint_shape_mismatch_exits_2(self):
        checkpoint = self.root / "wide.ckpt"
        ValueNetwork(2, [3, 4, 1], seed=0).save(checkpoint)
        config = self.write_config(scalar_config())
        with self.assertRaises(CommandError) as ctx:
            self.call("diagnose", config=str(config), out=str(self.root / "d"), checkpoint=str(checkpoint))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_trained_checkpoint_loads(self):
        config = self.write_config(scalar_config(extra="\n[diagnose]\nbatch = 2\npower_iters = 10\n"))
        self.call("train", config=str(config), out=str(self.root / "t"))
        self.call("diagnose", config=str(config), out=str(self.root / "d"),
                  checkpoint=str(self.root / "t" / "theta_final.ckpt"))
        manifest = json.loads((self.root / "d" / "manifest.json").read_text())
        self.assertTrue(manifest["summary"]["checkpoint"].endswith("theta_final.ckpt"))
        self.assertEqual(manifest["summary"]["problem"]["name"], "lqr")

    def test_checkpoint_from_another_config_exits_2(self):
        config = self.write_config(scalar_config())
        self.call("train", config=str(config), out=str(self.root / "t"))
        other = self.write_config(scalar_config().replace("seed = 3", "seed = 4"), name="other.toml")
        with self.assertRaises(CommandError) as ctx:
            self.call("diagnose", config=str(other), out=str(self.root / "d"),
                      checkpoint=str(self.root / "t" / "theta_final.ckpt"))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn("config", str(ctx.exception))


class OracleTests(CommandTestCase):
    def test_riccati_preset_matches_optimum(self):
        config = loads(scalar_config(N=200, extra="\n[oracle]\nholdout = 10\ntrain = false\n"))
        rows, _ = run_oracle(config, self.root / "oracle", RuntimeOptions())
        preset = next(row for row in rows if row["controller"] == "riccati_preset")
        self.assertLessEqual(abs(preset["gap"]), 0.01)
        self.assertEqual([row["controller"] for row in rows], ["riccati_preset", "untrained"])

    def test_zero_state_has_zero_gap(self):
        self.assertEqual(relative_gap(0.0, 0.0), 0.0)
        self.assertEqual(relative_gap(1.0, 0.0), float("inf"))
        self.assertAlmostEqual(relative_gap(1.1, 1.0), 0.1)

    def test_other_problems_exit_2(self):
        text = scalar_config().replace('name = "lqr"', 'name = "bicycle"')
        text = text.split("[problem.params]")[0] + "[grid]\nN = 5\n"
        config = self.write_config(text)
        with self.assertRaises(CommandError) as ctx:
            self.call("oracle", config=str(config), out=str(self.root / "o"))
        self.assertEqual(ctx.exception.returncode, 2)


class CompareTests(CommandTestCase):
    def test_work_units_per_backend(self):
        config = loads(scalar_config(extra='\n[compare]\nbackends = ["jfb", "implicit"]\nepochs = 1\nholdout = 4\n'))
        rows, summary, _ = run_compare(config, self.root / "cmp", RuntimeOptions())
        self.assertEqual([row["backend"] for row in rows], ["jfb", "implicit"])
        # one epoch of 5 iterations, N = 10 steps, batch 4
        self.assertEqual(rows[0]["cum_work_units"], 5 * 10 * 4)
        self.assertTrue(all(result["feasible"] for result in summary.values()))
        np.testing.assert_allclose(summary["jfb"]["final_objective"], summary["implicit"]["final_objective"], rtol=1e-6)

    def test_budget_marks_backend_infeasible(self):
        config = loads(scalar_config(extra='\n[compare]\nbackends = ["unrolled"]\nepochs = 1\nholdout = 2\n'))
        rows, summary, _ = run_compare(config, self.root / "cmp", RuntimeOptions(node_budget=10))
        self.assertEqual(rows, [{"backend": "unrolled", "epoch": "", "feasible": 0}])
        self.assertFalse(summary["unrolled"]["feasible"])


class NeighborhoodCommandTests(CommandTestCase):
    def test_rows_and_summary(self):
        extra = "\n[neighborhood]\nalphas = [0.05, 0.01]\niterations = 20\n"
        config = self.write_config(scalar_config(extra=extra))
        out = self.root / "nb"
        self.call("neighborhood", config=str(config), out=str(out))
        _, rows = read_csv(out / "neighborhood.csv")
        self.assertEqual([float(row["alpha"]) for row in rows], [0.05, 0.01])
        manifest = json.loads((out / "manifest.json").read_text())
        self.assertIn("monotone", manifest["summary"])


@skipUnless(settings.JFB_SLOW_TESTS, "set JFB_SLOW_TESTS=1 for long training runs")
class OracleAcceptanceTests(CommandTestCase):
    def test_training_closes_the_gap(self):
        extra = "\n[oracle]\nholdout = 100\n"
        text = scalar_config(N=50, extra=extra).replace("epochs = 2", "epochs = 40").replace(
            "iters_per_epoch = 5", "iters_per_epoch = 50").replace("alpha0 = 0.05", "alpha0 = 0.1")
        rows, _ = run_oracle(loads(text), self.root / "oracle", RuntimeOptions())
        gaps = {row["controller"]: row["gap"] for row in rows}
        self.assertLess(gaps["trained"], gaps["untrained"])


def quadrotor_one(**replacements):
    """The shipped quadrotor config cut down to a single agent."""
    text = (Path(settings.BASE_DIR) / "configs" / "quadrotor.toml").read_text(encoding="utf-8")
    text = text.replace("agents = 2", "agents = 1")
    for old, new in replacements.items():
        text = text.replace(old, new)
    return loads(text)


@skipUnless(settings.JFB_SLOW_TESTS, "set JFB_SLOW_TESTS=1 for long training runs")
class QuadrotorAcceptanceTests(CommandTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        # 25 epochs of 20 iterations, audited every 25
        config = quadrotor_one(**{"N = 20": "N = 50", "batch_size = 8": "batch_size = 16", "epochs = 5": "epochs = 25"})
        cls.config = config.with_overrides(audit_every=25)
        with tempfile.TemporaryDirectory() as tmp:
            cls.history, _ = run_train(cls.config, Path(tmp), RuntimeOptions())
        cls.reports = [a.report for a in cls.history.audits if a.report is not None]

    def test_run_shape(self):
        self.assertEqual(self.config.grid.integrator, "euler")
        self.assertEqual(len(self.history.records), 500)
        self.assertEqual(len(self.reports), 20)

    def test_operator_stays_contractive(self):
        gammas = [r.gamma_hat for r in self.reports]
        self.assertTrue(all(g is not None and g < 1.0 for g in gammas), gammas)

    def test_rank_flags_are_stable(self):
        flags = {r.pass_A3 for r in self.reports}
        self.assertEqual(len(flags), 1, flags)

    def test_jfb_direction_stays_aligned(self):
        angles = [r.angle for r in self.reports if r.angle is not None]
        self.assertTrue(angles)
        aligned = sum(angle < np.pi / 2 for angle in angles)
        self.assertGreaterEqual(aligned / len(angles), 0.95)
        self.assertIsNotNone(self.history.epsilon_v_min)
        self.assertGreater(self.history.epsilon_v_min, 0.0)


@skipUnless(settings.JFB_SLOW_TESTS, "set JFB_SLOW_TESTS=1 for long training runs")
class QuadrotorCompareAcceptanceTests(CommandTestCase):
    def test_jfb_matches_unrolled_for_less_work(self):
        config = quadrotor_one(**{'backends = ["jfb", "implicit", "unrolled"]': 'backends = ["jfb", "unrolled"]'})
        rows, summary, _ = run_compare(config, self.root / "cmp", RuntimeOptions())
        jfb, unrolled = summary["jfb"], summary["unrolled"]
        self.assertTrue(jfb["feasible"] and unrolled["feasible"])
        self.assertLessEqual(abs(jfb["final_objective"] - unrolled["final_objective"]),
                             0.1 * abs(unrolled["final_objective"]))
        self.assertLessEqual(jfb["cum_work_units"], 0.25 * unrolled["cum_work_units"])

        peaks = {(row["backend"], row["epoch"]): row["peak_nodes"] for row in rows}
        for epoch in range(1, config.compare.epochs + 1):
            with self.subTest(epoch=epoch):
                self.assertGreater(peaks[("unrolled", epoch)], peaks[("jfb", epoch)])

    def test_jfb_peak_nodes_ignore_max_iter(self):
        config = quadrotor_one()
        parts = build(config)
        batch = parts.problem.sample_states(config.seed, config.train.batch_size)
        peaks = set()
        for max_iter in (10, 50, 200, 500):
            cfg = parts.operator.cfg.model_copy(update={"max_iter": max_iter})
            operator = HamiltonianOperator(parts.problem, parts.net, cfg)
            peaks.add(grad_jfb(operator, batch, config.grid).peak_nodes)
        self.assertEqual(len(peaks), 1, peaks)
