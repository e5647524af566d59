import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from tape import (
    ClosedTapeError,
    NodeBudgetExceeded,
    NonFiniteError,
    ShapeMismatchError,
    Tape,
    detach,
    ops,
)


def numeric_grad(fn, x, step=1e-6):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (np.sum(fn(up)) - np.sum(fn(down))) / (2 * step)
    return grad


class ForwardTests(SimpleTestCase):
    def test_square(self):
        with Tape() as tape:
            x = tape.variable(3.0)
            y = x ** 2
        self.assertEqual(float(y.value), 9.0)

    def test_tanh_zero(self):
        with Tape() as tape:
            y = ops.tanh(tape.variable(0.0))
        self.assertEqual(float(y.value), 0.0)

    def test_matrix_vector(self):
        with Tape() as tape:
            A = tape.variable([[1.0, 2.0], [3.0, 4.0]])
            y = A @ np.ones(2)
        assert_allclose(y.value, [3.0, 7.0])

    def test_shape_mismatch_names_primitive(self):
        with Tape() as tape:
            A = tape.variable(np.ones((2, 3)))
            with self.assertRaises(ShapeMismatchError) as ctx:
                ops.matmul(A, np.ones(2))
        self.assertEqual(ctx.exception.op, "matmul")
        self.assertEqual(ctx.exception.shapes, ((2, 3), (2,)))

    def test_plain_arrays_are_not_recorded(self):
        out = ops.tanh(ops.add(np.ones(3), 1.0))
        self.assertIsInstance(out, np.ndarray)
        assert_allclose(out, np.tanh(2.0) * np.ones(3))


class VjpTests(SimpleTestCase):
    def test_power_rule(self):
        with Tape() as tape:
            x = tape.variable(3.0)
            grads = tape.vjp(x ** 2, [x])
        self.assertAlmostEqual(float(grads[x]), 6.0)

    def test_tanh_slope_at_zero(self):
        with Tape() as tape:
            x = tape.variable(0.0)
            grads = tape.vjp(ops.tanh(x), [x])
        self.assertAlmostEqual(float(grads[x]), 1.0)

    def test_bilinear_adjoint(self):
        v = np.array([1.0, -2.0])
        c = np.array([0.5, 3.0])
        with Tape() as tape:
            A = tape.variable(np.eye(2))
            grads = tape.vjp(A @ v, [A], c)
        assert_allclose(grads[A], np.outer(c, v))

    def test_absent_leaf_is_zero(self):
        with Tape() as tape:
            x = tape.variable(1.0)
            y = tape.variable([1.0, 2.0])
            grads = tape.vjp(x * 2.0, [y])
        assert_allclose(grads[y], [0.0, 0.0])

    def test_intermediate_nodes_receive_cotangents(self):
        with Tape() as tape:
            x = tape.variable(2.0)
            mid = x * 3.0
            root = mid ** 2
            grads = tape.vjp(root, [mid, x])
        self.assertAlmostEqual(float(grads[mid]), 12.0)
        self.assertAlmostEqual(float(grads[x]), 36.0)

    def test_cotangent_shape_checked(self):
        with Tape() as tape:
            x = tape.variable([1.0, 2.0])
            with self.assertRaises(ShapeMismatchError):
                tape.vjp(x * 2.0, [x], np.ones(3))

    def test_closed_tape(self):
        with Tape() as tape:
            x = tape.variable(1.0)
            y = x * 2.0
        with self.assertRaises(ClosedTapeError):
            tape.vjp(y, [x])

    def test_nan_reports_primitive(self):
        with Tape() as tape:
            x = tape.variable(0.0)
            y = ops.log(x)
            with self.assertRaises(NonFiniteError) as ctx:
                tape.vjp(y, [x])
        self.assertEqual(ctx.exception.op, "log")

    def test_forward_nan_is_named_even_with_finite_cotangents(self):
        with Tape() as tape:
            x = tape.variable(np.array([-1.0, 2.0]))
            y = ops.sum(ops.tanh(ops.log(x)) * 3.0)
            with self.assertRaises(NonFiniteError) as ctx:
                tape.vjp(y, [x])
        self.assertEqual(ctx.exception.op, "log")
        self.assertEqual(ctx.exception.kind, "value")

    def test_nan_off_the_path_is_ignored(self):
        with Tape() as tape:
            x = tape.variable(np.array([-1.0, 2.0]))
            ops.log(x)
            g = tape.vjp(ops.sum(x * x), [x])[x]
        assert_allclose(g, [-2.0, 4.0])

    def test_linear_in_cotangent(self):
        rng = np.random.default_rng(0)
        W = rng.uniform(-2, 2, (3, 4))
        c1, c2 = rng.normal(size=3), rng.normal(size=3)
        with Tape() as tape:
            x = tape.variable(rng.uniform(-2, 2, 4))
            y = ops.tanh(W @ x) * ops.exp(ops.sum(x) * 0.1)
            g1 = tape.vjp(y, [x], c1)[x]
            g2 = tape.vjp(y, [x], c2)[x]
            g12 = tape.vjp(y, [x], 2.0 * c1 - 0.5 * c2)[x]
        assert_allclose(g12, 2.0 * g1 - 0.5 * g2, atol=1e-12)


class PrimitiveFiniteDifferenceTests(SimpleTestCase):
    """Every primitive against central differences on inputs in [-2, 2]."""

    def setUp(self):
        self.rng = np.random.default_rng(7)
        self.x0 = self.rng.uniform(-2, 2, 5)
        self.W = self.rng.uniform(-2, 2, (3, 5))

    def check(self, fn, x0=None, rtol=1e-6):
        x0 = self.x0 if x0 is None else x0
        with Tape() as tape:
            x = tape.variable(x0)
            out = fn(x)
            got = tape.vjp(out, [x], np.ones_like(out.value))[x]
        expected = numeric_grad(fn, x0)
        assert_allclose(got, expected, rtol=rtol, atol=1e-8)

    def test_add_sub_mul_div_neg(self):
        self.check(lambda x: (x + 1.5) * (x - 0.5))
        self.check(lambda x: -x / (x * x + 1.0))

    def test_matmul_both_sides(self):
        self.check(lambda x: self.W @ x)
        self.check(lambda x: (self.W @ x) @ self.W)
        self.check(lambda x: ops.dot(x, x))

    def test_matmul_matrix_operand(self):
        v = self.rng.uniform(-2, 2, 5)
        self.check(lambda A: A @ v, x0=self.W)
        self.check(lambda A: A @ self.W.T, x0=self.W)

    def test_transcendental(self):
        self.check(ops.tanh)
        self.check(ops.exp)
        self.check(ops.sin)
        self.check(ops.cos)
        self.check(lambda x: ops.tan(x * 0.5))
        self.check(lambda x: ops.log(x * x + 0.5))

    def test_power_and_sum(self):
        self.check(lambda x: ops.power(x * x + 1.0, 1.5))
        self.check(lambda x: ops.sum(x ** 3))
        self.check(lambda x: ops.sum(ops.reshape(x[:4], (2, 2)), axis=0))

    def test_concat_stack_index(self):
        self.check(lambda x: ops.concat([x[1:3], x[0:1], x * 2.0]))
        self.check(lambda x: ops.stack([x[0], x[3] * x[1]]))
        self.check(lambda x: x[np.array([0, 0, 2])])

    def test_clamp_interior_and_bounds(self):
        lo = np.full(5, -0.5)
        self.check(lambda x: ops.clamp(x, lo, 1.0) * x)

    def test_clamp_routes_to_differentiable_bound(self):
        with Tape() as tape:
            x = tape.variable([-3.0, 0.0, 3.0])
            lo = tape.variable([-1.0, -1.0, -1.0])
            out = ops.clamp(x, lo, 1.0)
            grads = tape.vjp(out, [x, lo])
        assert_allclose(out.value, [-1.0, 0.0, 1.0])
        assert_allclose(grads[x], [0.0, 1.0, 0.0])
        assert_allclose(grads[lo], [1.0, 0.0, 0.0])

    def test_clamp_tie_is_interior(self):
        with Tape() as tape:
            x = tape.variable([1.0])
            grads = tape.vjp(ops.clamp(x, 1.0, 2.0), [x])
        assert_allclose(grads[x], [1.0])


class DetachTests(SimpleTestCase):
    def test_detach_severs_path(self):
        with Tape() as tape:
            x = tape.variable(3.0)
            y = detach(x ** 2) * 1.0
            grads = tape.vjp(y, [x])
        self.assertEqual(float(grads[x]), 0.0)

    def test_detach_inside_sum(self):
        with Tape() as tape:
            x = tape.variable(2.0)
            grads = tape.vjp(x + detach(x), [x])
        self.assertEqual(float(grads[x]), 1.0)

    def test_detach_constant(self):
        out = detach(np.array([1.0, 2.0]))
        assert_allclose(out, [1.0, 2.0])
        with Tape() as tape:
            node = detach(tape.variable(4.0))
        self.assertEqual(node.parents, ())
        self.assertEqual(float(node.value), 4.0)


class AccountingTests(SimpleTestCase):
    def one_step(self, u, x):
        return ops.mark(u - 0.1 * (u - x))

    def run_iterations(self, k, tracked):
        with Tape() as tape:
            x = tape.variable(np.ones(3))
            u = np.zeros(3)
            for _ in range(k):
                u = self.one_step(u, x if tracked else x.value)
            if not tracked:
                u = self.one_step(u, x)
            tape.vjp(ops.sum(u), [x])
        return tape.stats

    def test_detached_iterations_keep_peak_constant(self):
        peaks = {self.run_iterations(k, tracked=False).peak_node_count for k in (1, 10, 100)}
        self.assertEqual(len(peaks), 1)

    def test_tracked_iterations_grow_linearly(self):
        p10 = self.run_iterations(10, tracked=True).peak_node_count
        p20 = self.run_iterations(20, tracked=True).peak_node_count
        p40 = self.run_iterations(40, tracked=True).peak_node_count
        self.assertEqual(p40 - p20, 2 * (p20 - p10))
        self.assertGreater(p20, p10)

    def test_marks_count_work_units(self):
        self.assertEqual(self.run_iterations(10, tracked=False).vjp_count, 1)
        self.assertEqual(self.run_iterations(10, tracked=True).vjp_count, 10)

    def test_node_budget(self):
        with Tape(node_budget=5) as tape:
            x = tape.variable(1.0)
            with self.assertRaises(NodeBudgetExceeded) as ctx:
                for _ in range(10):
                    x = x * 1.0
        self.assertEqual(ctx.exception.budget, 5)

    def test_current_tape_is_scoped(self):
        self.assertIsNone(Tape.current())
        with Tape() as tape:
            self.assertIs(Tape.current(), tape)
        self.assertIsNone(Tape.current())
