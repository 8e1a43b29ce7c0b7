"""Tests the `tape` module of the library."""
import math
import sys
import unittest

import numpy as np

sys.path.append(".")
from sobolprune import tape
from sobolprune.exceptions import ShapeError, TapeError
from sobolprune.interval import Interval, IntervalArray


def _example(x0, x1):
    # ln(x0 * x1) + cos(x0 / x1)
    return tape.add(tape.log(x0 * x1), tape.cos(x0 / x1))


def _central_difference(recorded, values, name, h=1e-6):
    # Central differences of a scalar-output tape with respect to one input.
    base = np.asarray(values[name], dtype=float)
    result = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        up, down = base.copy(), base.copy()
        up[index] += h
        down[index] -= h
        result[index] = (
            float(recorded.forward({**values, name: up}))
            - float(recorded.forward({**values, name: down}))) / (2 * h)
    return result


class RecordTest(unittest.TestCase):
    """Tests recording and replaying computations."""

    def test_identity(self) -> None:
        recorded = tape.record(lambda x: x, {"x": 5.0})
        self.assertEqual(len(recorded), 1)
        self.assertEqual(recorded.output, recorded.index_of("x"))
        self.assertEqual(float(recorded.output_value), 5)

    def test_forward(self) -> None:
        recorded = tape.record(_example, {"x0": 2.0, "x1": 3.0})
        expected = math.log(6) + math.cos(2 / 3)
        self.assertAlmostEqual(float(recorded.output_value), expected, 12)
        self.assertAlmostEqual(expected, 2.57766, 5)
        replayed = recorded.forward({"x0": 1.0, "x1": 4.0})
        self.assertAlmostEqual(
            float(replayed), math.log(4) + math.cos(0.25), 12)
        with self.assertRaises(TapeError):
            recorded.forward({"x0": 1.0})

    def test_plain_values_evaluate(self) -> None:
        self.assertAlmostEqual(float(tape.silu(np.array(1.0))), 0.7310586, 6)
        result = tape.matmul(np.eye(2), np.ones((2, 1)))
        np.testing.assert_array_equal(result, np.ones((2, 1)))

    def test_errors(self) -> None:
        recorded = tape.Tape()
        x = recorded.input("x", 1.0)
        with self.assertRaises(TapeError):
            recorded.input("x", 2.0)
        other = tape.Tape().input("y", 1.0)
        with self.assertRaises(TapeError):
            x + other
        with self.assertRaises(ShapeError):
            tape.matmul(recorded.input("v", np.ones(2)), np.ones((2, 1)))
        with self.assertRaises(TapeError):
            tape.record(lambda x: tape.norm_cdf(x), {"x": Interval(0, 1)})
        with self.assertRaises(TapeError):
            recorded.index_of("z")
        with self.assertRaises(TypeError):
            tape.record(lambda x: x, [1.0])


class ReverseTest(unittest.TestCase):
    """Tests the adjoint sweep."""

    def test_example_gradient(self) -> None:
        recorded = tape.record(_example, {"x0": 2.0, "x1": 3.0})
        grads = tape.gradient(recorded)
        self.assertAlmostEqual(
            float(grads["x0"]), 1 / 2 - math.sin(2 / 3) / 3, 12)
        self.assertAlmostEqual(
            float(grads["x1"]), 1 / 3 + 2 * math.sin(2 / 3) / 9, 12)
        self.assertAlmostEqual(float(grads["x0"]), 0.29391, 5)
        self.assertAlmostEqual(float(grads["x1"]), 0.47073, 5)

    def test_linear_gradient(self) -> None:
        w = np.array([[1.5, -2.0, 0.25]])
        recorded = tape.record(
            lambda x: tape.reduce_sum(tape.matmul(w, x)),
            {"x": np.ones((3, 1))})
        np.testing.assert_array_equal(
            tape.gradient(recorded)["x"], w.T)

    def test_finite_differences(self) -> None:
        rng = np.random.default_rng(3)

        def func(x, w, b):
            hidden = tape.silu(tape.matmul(w, x) + b)
            return tape.reduce_sum(tape.sigmoid(hidden) * tape.exp(-x.T @ x))

        for _ in range(20):
            values = {
                "x": rng.normal(size=(3, 1)) * 0.5,
                "w": rng.normal(size=(4, 3)),
                "b": rng.normal(size=(4, 1))}
            recorded = tape.record(func, values)
            grads = tape.gradient(recorded)
            for name in values:
                np.testing.assert_allclose(
                    grads[name], _central_difference(recorded, values, name),
                    rtol=1e-5, atol=1e-7)

    def test_unused_input(self) -> None:
        recorded = tape.record(lambda x, y: x * 2.0, {"x": 1.0, "y": 3.0})
        grads = tape.gradient(recorded)
        self.assertEqual(float(grads["x"]), 2)
        self.assertEqual(float(grads["y"]), 0)
        only_x = tape.gradient(recorded, wrt="x")
        self.assertEqual(list(only_x), ["x"])

    def test_seed(self) -> None:
        recorded = tape.record(lambda x: x * 3.0, {"x": np.ones(2)})
        np.testing.assert_array_equal(
            tape.gradient(recorded, seed=np.array([1.0, 2.0]))["x"], [3, 6])
        with self.assertRaises(TapeError):
            tape.reverse(recorded, seed=np.ones(3))
        with self.assertRaises(TapeError):
            tape.reverse(recorded, seed=1.0)
        single = tape.record(lambda x: x * 3.0, {"x": np.ones((1, 1))})
        self.assertEqual(float(tape.gradient(single)["x"][0, 0]), 3)

    def test_interval_adjoints(self) -> None:
        recorded = tape.record(lambda x: x * x, {"x": Interval(-1, 2)})
        self.assertTrue(recorded.is_interval)
        adjoint = tape.gradient(recorded)["x"]
        self.assertIsInstance(adjoint, IntervalArray)
        self.assertEqual(adjoint.lo, -2)
        self.assertEqual(adjoint.hi, 4)
        rng = np.random.default_rng(5)
        for p in rng.uniform(-1, 2, 1000):
            self.assertTrue(adjoint.contains(2 * p))
        unused = tape.record(lambda x, y: x + 1.0, {
            "x": Interval(0, 1), "y": Interval(2, 3)})
        zero = tape.gradient(unused)["y"]
        self.assertEqual((zero.lo, zero.hi), (0, 0))

    def test_interval_adjoint_inclusion(self) -> None:
        rng = np.random.default_rng(11)
        w = rng.normal(size=(3, 2))

        def func(x):
            return tape.reduce_sum(tape.silu(tape.matmul(w, x)))

        box = IntervalArray([[-1.0], [0.5]], [[0.0], [1.5]])
        adjoint = tape.gradient(tape.record(func, {"x": box}))["x"]
        for _ in range(200):
            x = box.lo + (box.hi - box.lo) * rng.random((2, 1))
            point = tape.gradient(tape.record(func, {"x": x}))["x"]
            self.assertTrue(adjoint.contains(point).all())


class SecondOrderTest(unittest.TestCase):
    """Tests recorded adjoint sweeps."""

    def test_mixed_derivative(self) -> None:
        recorded = tape.record(
            lambda x, w, b: tape.silu(w * x + b),
            {"x": 1.0, "w": 1.0, "b": 0.0})
        nested = tape.reverse_recorded(recorded, wrt="x")
        self.assertAlmostEqual(
            float(nested.output_value), float(tape.gradient(recorded)["x"]),
            12)
        mixed = float(tape.gradient(nested, wrt="w")["w"])
        self.assertAlmostEqual(mixed, 1.230037, 6)

    def test_second_derivative(self) -> None:
        recorded = tape.record(lambda x: tape.sin(x) * x, {"x": 0.7})
        nested = tape.reverse_recorded(recorded, wrt="x")
        second = float(tape.gradient(nested)["x"])
        self.assertAlmostEqual(second, 2 * math.cos(0.7) - 0.7 * math.sin(0.7), 12)

    def test_primals_and_adjoints(self) -> None:
        recorded = tape.record(
            lambda x, y: x * y, {"x": 2.0, "y": 5.0})
        nested = tape.reverse_recorded(recorded)
        self.assertIsNone(nested.output)
        self.assertEqual(float(nested.adjoints["x"].value), 5)
        self.assertEqual(float(nested.adjoints["y"].value), 2)
        self.assertEqual(
            float(nested.primals[recorded.output].value), 10)

    def test_relu_second_derivative_is_zero(self) -> None:
        recorded = tape.record(lambda x: tape.relu(x * x), {"x": 1.5})
        nested = tape.reverse_recorded(recorded, wrt="x")
        self.assertEqual(float(tape.gradient(nested)["x"]), 2)

    def test_third_order_rejected(self) -> None:
        recorded = tape.record(lambda x: tape.silu(x), {"x": 0.3})
        nested = tape.reverse_recorded(recorded, wrt="x")
        twice = tape.reverse_recorded(nested, wrt="x")
        with self.assertRaises(TapeError):
            tape.reverse(twice)

    def test_interval_tape_rejected(self) -> None:
        recorded = tape.record(lambda x: x * x, {"x": Interval(0, 1)})
        with self.assertRaises(TapeError):
            tape.reverse_recorded(recorded)


if __name__ == "__main__":
    unittest.main()
