import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from tape import Tape, ops
from valuenet import CheckpointError, NetworkShapeError, ValueNetwork, param_count, read_checkpoint


def small_net(n=2, seed=3):
    net = ValueNetwork(n, widths=[1 + n, 8, 6, 1], seed=seed)
    # nonzero biases so every parameter participates
    net.set_theta(np.random.default_rng(seed).uniform(-1, 1, net.num_params))
    return net


class ShapeTests(SimpleTestCase):
    def test_default_architecture(self):
        net = ValueNetwork(2)
        self.assertEqual(net.widths, [3, 64, 64, 1])
        self.assertEqual(net.num_params, 4481)

    def test_param_count_formula(self):
        self.assertEqual(param_count([4, 5, 1]), 5 * 5 + 6)

    def test_input_width_must_match_state(self):
        with self.assertRaises(NetworkShapeError):
            ValueNetwork(2, widths=[2, 4, 1])

    def test_state_dimension_checked(self):
        net = small_net()
        with self.assertRaises(NetworkShapeError):
            net.eval_phi(net.theta, 0.0, np.zeros(3))

    def test_flatten_round_trip(self):
        net = small_net()
        layers = net.unflatten(net.theta)
        self.assertEqual(layers[0][0].shape, (8, 3))
        assert_allclose(ValueNetwork.flatten(layers), net.theta, rtol=0, atol=0)

    def test_init_is_seeded(self):
        a = ValueNetwork(3, seed=11)
        b = ValueNetwork(3, seed=11)
        c = ValueNetwork(3, seed=12)
        assert_allclose(a.theta, b.theta, rtol=0, atol=0)
        self.assertFalse(np.allclose(a.theta, c.theta))
        bound = np.sqrt(6.0 / (4 + 64))
        self.assertLessEqual(np.abs(a.theta[:4 * 64]).max(), bound)


class EvaluationTests(SimpleTestCase):
    def test_zero_network_is_final_bias(self):
        net = ValueNetwork(2, widths=[3, 4, 1], theta=np.zeros(param_count([3, 4, 1])))
        theta = net.theta.copy()
        theta[-1] = 0.7
        self.assertAlmostEqual(float(net.eval_phi(theta, 0.3, np.array([5.0, -1.0]))), 0.7)
        assert_allclose(net.grad_z_phi(theta, 0.3, np.array([5.0, -1.0])), [0.0, 0.0])

    def test_single_linear_layer(self):
        w = np.array([0.5, 2.0, -3.0])
        net = ValueNetwork(2, widths=[3, 1], theta=np.concatenate([w, [1.5]]))
        z = np.array([1.0, 2.0])
        self.assertAlmostEqual(float(net.eval_phi(net.theta, 0.4, z)), 0.5 * 0.4 + 2.0 - 6.0 + 1.5)
        assert_allclose(net.grad_z_phi(net.theta, 0.4, z), [2.0, -3.0])
        assert_allclose(net.grad_z_phi(net.theta, 0.9, -z), [2.0, -3.0])

    def test_matches_reference_forward(self):
        net = small_net()
        rng = np.random.default_rng(0)
        for _ in range(20):
            t, z = rng.uniform(0, 1), rng.uniform(-2, 2, 2)
            self.assertAlmostEqual(float(net.eval_phi(net.theta, t, z)), net.reference_phi(t, z), delta=1e-12)

    def test_recorded_value_matches_untracked(self):
        net = small_net()
        z = np.array([0.3, -0.2])
        with Tape() as tape:
            theta = tape.variable(net.theta)
            node = net.eval_phi(theta, 0.5, z)
        self.assertAlmostEqual(float(node.value), float(net.eval_phi(net.theta, 0.5, z)), delta=1e-14)


class GradientTests(SimpleTestCase):
    def test_state_gradient_matches_finite_differences(self):
        net = small_net()
        rng = np.random.default_rng(1)
        step = 1e-6
        for _ in range(100):
            theta = rng.uniform(-1, 1, net.num_params)
            t, z = rng.uniform(0, 1), rng.uniform(-2, 2, 2)
            expected = np.zeros(2)
            for i in range(2):
                e = np.zeros(2)
                e[i] = step
                expected[i] = (net.eval_phi(theta, t, z + e) - net.eval_phi(theta, t, z - e)) / (2 * step)
            assert_allclose(net.grad_z_phi(theta, t, z), expected, rtol=1e-6, atol=1e-8)

    def test_parameter_derivative_of_state_gradient(self):
        net = small_net()
        t, z = 0.25, np.array([0.4, -1.1])
        c = np.array([0.7, -0.3])
        with Tape() as tape:
            theta = tape.variable(net.theta)
            inner = ops.dot(net.grad_z_phi(theta, t, z), c)
            got = tape.vjp(inner, [theta])[theta]

        step = 1e-6
        coords = np.random.default_rng(2).choice(net.num_params, 20, replace=False)
        for j in coords:
            up, down = net.theta.copy(), net.theta.copy()
            up[j] += step
            down[j] -= step
            fd = (net.grad_z_phi(up, t, z) @ c - net.grad_z_phi(down, t, z) @ c) / (2 * step)
            assert_allclose(got[j], fd, rtol=1e-5, atol=1e-8)

    def test_gradient_flows_to_state_node(self):
        net = small_net()
        with Tape() as tape:
            z = tape.variable([0.1, 0.2])
            phi = net.eval_phi(net.theta, 0.0, z)
            got = tape.vjp(phi, [z])[z]
        assert_allclose(got, net.grad_z_phi(net.theta, 0.0, np.array([0.1, 0.2])), rtol=1e-12)


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "net.ckpt"

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_lossless(self):
        net = small_net(seed=9)
        net.save(self.path)
        loaded = ValueNetwork.load(self.path, n_state=2)
        self.assertEqual(loaded.widths, net.widths)
        self.assertEqual(loaded.seed, 9)
        self.assertTrue(np.array_equal(loaded.theta, net.theta))

    def test_state_mismatch(self):
        small_net().save(self.path)
        with self.assertRaises(NetworkShapeError):
            ValueNetwork.load(self.path, n_state=3)

    def test_rejects_foreign_file(self):
        self.path.write_bytes(b"not a checkpoint")
        with self.assertRaises(CheckpointError):
            ValueNetwork.load(self.path)

    def test_rejects_truncated_values(self):
        small_net().save(self.path)
        self.path.write_bytes(self.path.read_bytes()[:-8])
        with self.assertRaises(CheckpointError):
            ValueNetwork.load(self.path)

    def test_config_hash_is_checked(self):
        net = small_net()
        net.save(self.path, config_hash="ab" * 32)
        self.assertEqual(read_checkpoint(self.path).config_hash, "ab" * 32)
        assert_allclose(ValueNetwork.load(self.path, config_hash="ab" * 32).theta, net.theta)
        with self.assertRaises(CheckpointError):
            ValueNetwork.load(self.path, config_hash="cd" * 32)

    def test_unhashed_checkpoint_loads_with_warning(self):
        small_net().save(self.path)
        with self.assertLogs("valuenet.network", level="WARNING"):
            ValueNetwork.load(self.path, n_state=2, config_hash="ab" * 32)

    def test_reads_first_format_version(self):
        net = small_net()
        header = b"JFBV" + struct.pack("<II", 1, len(net.widths)) + struct.pack(f"<{len(net.widths)}I", *net.widths)
        header += struct.pack("<qQ", 3, net.num_params)
        self.path.write_bytes(header + np.ascontiguousarray(net.theta, dtype="<f8").tobytes())
        checkpoint = read_checkpoint(self.path)
        self.assertEqual(checkpoint.config_hash, "")
        self.assertEqual(checkpoint.widths, net.widths)
        assert_allclose(checkpoint.theta, net.theta)
