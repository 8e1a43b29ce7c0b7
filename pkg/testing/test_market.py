"""Tests the `market` module of the library."""
import math
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from pydantic import ValidationError

sys.path.append(".")
from sobolprune import interval, market, tape
from sobolprune.exceptions import ArtifactError, MarketError, ShapeError
from sobolprune.market import BasketConfig, Dataset


def _basket(weights, vols, rho, **kwargs) -> BasketConfig:
    m = len(weights)
    correlation = [[1.0 if j == k else rho for k in range(m)] for j in range(m)]
    kwargs.setdefault("spot_box", [(90.0, 110.0)] * m)
    return BasketConfig(
        weights=weights, vols=vols, correlation=correlation, **kwargs)


# B_0 - K in units of sigma_B sqrt(T).
MONEYNESS = (-1.5, -0.5, 0.0, 0.5, 1.5)


def _forwards_at(cfg: BasketConfig, z: float) -> np.ndarray:
    # Equal forwards, so B_0 = F since the weights sum to one.
    scale = market.basket_vol(cfg) * math.sqrt(cfg.maturity)
    return np.full(cfg.m, cfg.strike + z * scale)


class BasketConfigTest(unittest.TestCase):
    """Tests validation of basket settings."""

    def test_defaults(self) -> None:
        cfg = market.default_basket()
        self.assertEqual(cfg.m, 5)
        self.assertEqual(cfg.strike, 100)
        self.assertEqual(cfg.maturity, 1)
        self.assertAlmostEqual(sum(cfg.weights), 1, 12)
        np.testing.assert_array_equal(cfg.box_lo, [90] * 5)
        self.assertEqual(len(cfg.box), 5)

    def test_invalid(self) -> None:
        cases = [
            dict(weights=[0.5, 0.6], vols=[10, 10], rho=0.0),
            dict(weights=[0.5, 0.5], vols=[10, -1], rho=0.0),
            dict(weights=[0.5, 0.5], vols=[10, 10], rho=2.0),
            dict(weights=[0.5, 0.5], vols=[10, 10], rho=0.0, strike=0.0),
            dict(weights=[0.5, 0.5], vols=[10, 10], rho=0.0, maturity=-1.0),
            dict(weights=[0.5, 0.5], vols=[10], rho=0.0),
            dict(weights=[0.5, 0.5], vols=[10, 10], rho=0.0,
                 spot_box=[(1.0, 0.0), (1.0, 2.0)]),
            dict(weights=[1.0], vols=[10], rho=0.0, smoothing_width=0.0),
        ]
        for case in cases:
            with self.assertRaises(ValidationError):
                _basket(**case)
        with self.assertRaises(ValidationError):
            BasketConfig(
                weights=[0.5, 0.5], vols=[10, 10],
                correlation=[[1.0, 0.2], [0.3, 1.0]],
                spot_box=[(90, 110)] * 2)
        cfg = _basket([1.0], [10.0], 0.0)
        with self.assertRaises(ValidationError):
            BasketConfig(**{**cfg.model_dump(), "strike": -1.0})


class AnalyticTest(unittest.TestCase):
    """Tests the closed-form price and Greeks."""

    def test_basket_vol(self) -> None:
        self.assertAlmostEqual(market.basket_vol(_basket([1.0], [10.0], 0.0)), 10, 12)
        self.assertAlmostEqual(
            market.basket_vol(_basket([0.5, 0.5], [10.0, 10.0], 1.0)), 10, 12)
        self.assertAlmostEqual(
            market.basket_vol(_basket([0.5, 0.5], [10.0, 20.0], 0.3)),
            math.sqrt(155), 12)
        self.assertAlmostEqual(math.sqrt(155), 12.4499, 4)

    def test_at_the_money(self) -> None:
        cfg = _basket([1.0], [10.0], 0.0)
        self.assertAlmostEqual(market.analytic_price(cfg, [100.0]), 3.98942, 5)
        self.assertAlmostEqual(
            market.analytic_price(cfg, [100.0]), 10 / math.sqrt(2 * math.pi), 12)
        np.testing.assert_allclose(market.analytic_delta(cfg, [100.0]), [0.5])
        np.testing.assert_allclose(
            market.analytic_gamma(cfg, [100.0]), [[0.0398942]], atol=1e-7)

    def test_far_from_the_money(self) -> None:
        cfg = _basket([1.0], [10.0], 0.0)
        self.assertAlmostEqual(market.analytic_price(cfg, [200.0]), 100, 10)
        self.assertAlmostEqual(market.analytic_price(cfg, [0.0]), 0, 10)
        self.assertGreater(market.analytic_price(cfg, [0.0]), -1e-15)

    def test_batch_shapes(self) -> None:
        cfg = market.default_basket(m=3)
        x = np.random.default_rng(0).uniform(90, 110, (7, 3))
        self.assertEqual(market.analytic_price(cfg, x).shape, (7,))
        self.assertEqual(market.analytic_delta(cfg, x).shape, (7, 3))
        gamma = market.analytic_gamma(cfg, x)
        self.assertEqual(gamma.shape, (7, 3, 3))
        np.testing.assert_allclose(gamma, np.transpose(gamma, (0, 2, 1)))
        self.assertEqual(np.linalg.matrix_rank(gamma[0]), 1)
        with self.assertRaises(ShapeError):
            market.analytic_price(cfg, np.ones(4))

    def test_delta_matches_differentiation(self) -> None:
        cfg = _basket([0.2, 0.3, 0.5], [10.0, 15.0, 30.0], 0.4)
        rng = np.random.default_rng(1)
        for _ in range(20):
            forwards = rng.uniform(90, 110, 3)
            recorded = tape.record(
                lambda f: market.analytic_price(cfg, f), {"f": forwards})
            self.assertAlmostEqual(
                float(recorded.output_value),
                market.analytic_price(cfg, forwards), 12)
            np.testing.assert_allclose(
                tape.gradient(recorded)["f"],
                market.analytic_delta(cfg, forwards), rtol=1e-10, atol=1e-14)
        batch = rng.uniform(90, 110, (5, 3))
        recorded = tape.record(
            lambda f: tape.reduce_sum(market.analytic_price(cfg, f)),
            {"f": batch})
        np.testing.assert_allclose(
            tape.gradient(recorded)["f"], market.analytic_delta(cfg, batch),
            rtol=1e-10, atol=1e-14)

    def test_gamma_matches_finite_differences(self) -> None:
        cfg = _basket([0.2, 0.3, 0.5], [10.0, 15.0, 30.0], 0.4)
        forwards = np.array([95.0, 101.0, 104.0])
        h = 1e-4
        for j in range(3):
            step = np.zeros(3)
            step[j] = h
            column = (
                market.analytic_delta(cfg, forwards + step)
                - market.analytic_delta(cfg, forwards - step)) / (2 * h)
            np.testing.assert_allclose(
                market.analytic_gamma(cfg, forwards)[:, j], column,
                rtol=1e-6, atol=1e-10)


class SmoothingTest(unittest.TestCase):
    """Tests the smoothed payoff."""

    def test_smooth_payoff(self) -> None:
        for width in (0.05, 1.0, 7.0):
            self.assertEqual(market.smooth_payoff(0.0, width), 0)
        self.assertAlmostEqual(market.smooth_payoff(1.0, 0.05), 1.0, 8)
        self.assertAlmostEqual(market.smooth_payoff(-1.0, 0.05), 0.0, 8)
        x = np.linspace(-3, 3, 61)
        np.testing.assert_allclose(
            market.sigmoid_blend(x, lambda v: 0 * v, lambda v: v, 0.0, 0.5),
            market.smooth_payoff(x, 0.5), atol=1e-15)
        h = 1e-6
        np.testing.assert_allclose(
            market.smooth_payoff_derivative(x, 0.5),
            (market.smooth_payoff(x + h, 0.5)
             - market.smooth_payoff(x - h, 0.5)) / (2 * h), atol=1e-8)
        for width in (0.0, -1.0, float("nan")):
            with self.assertRaises(MarketError):
                market.smooth_payoff(1.0, width)
        with self.assertRaises(TypeError):
            market.smooth_payoff(1.0, "0.1")

    def test_limit_of_small_width(self) -> None:
        magnitude = np.linspace(1e-3, 1, 5000)
        x = np.concatenate([-magnitude[::-1], magnitude])
        error = np.abs(market.smooth_payoff(x, 1e-6) - np.maximum(x, 0))
        self.assertEqual(x.shape, (10 ** 4,))
        self.assertLess(error.max(), 1e-5)

    def test_derivative_is_lipschitz(self) -> None:
        # The second derivative peaks at 0 with value 1 / (2 w).
        for width in (0.05, 0.5, 2.0):
            x = np.linspace(-20 * width, 20 * width, 20001)
            slope = market.smooth_payoff_derivative(x, width)
            steepest = np.abs(np.diff(slope) / np.diff(x)).max()
            self.assertLessEqual(steepest, 1.1 / (2 * width))
            self.assertGreater(steepest, 0.9 / (2 * width))


class SamplingTest(unittest.TestCase):
    """Tests the Monte Carlo sampler."""

    def test_shapes_and_targets(self) -> None:
        cfg = market.default_basket(m=3)
        dataset = market.sample(cfg, 5000, seed=3)
        self.assertEqual(len(dataset), 5000)
        self.assertEqual(dataset.m, 3)
        self.assertTrue(((dataset.x >= 90) & (dataset.x <= 110)).all())
        self.assertTrue((dataset.y >= 0).all())
        in_money = dataset.y > 0
        np.testing.assert_allclose(
            dataset.dydx[in_money], np.full((in_money.sum(), 3), 1 / 3))
        np.testing.assert_array_equal(dataset.dydx[~in_money], 0)
        sample = next(iter(dataset))
        self.assertEqual(sample.x.shape, (3,))
        self.assertIsInstance(sample.y, float)

    def test_reproducible(self) -> None:
        cfg = market.default_basket(m=2)
        first = market.sample(cfg, 10000, seed=8)
        for workers in (1, 3, 100):
            other = market.sample(cfg, 10000, seed=8, workers=workers)
            np.testing.assert_array_equal(first.x, other.x)
            np.testing.assert_array_equal(first.y, other.y)
        self.assertFalse(
            np.array_equal(first.y, market.sample(cfg, 10000, seed=9).y))
        with self.assertRaises(ValueError):
            market.sample(cfg, 0, seed=1)

    def test_pathwise_delta_unbiased(self) -> None:
        cfg = _basket([0.5, 0.5], [10.0, 20.0], 0.3)
        n = 10 ** 6
        for level, z in enumerate(MONEYNESS):
            forwards = _forwards_at(cfg, z)
            paths = market.sample_paths(cfg, forwards, n, seed=100 + level)
            p = float(market.norm_cdf(z))
            expected = market.analytic_delta(cfg, forwards)
            for i, weight in enumerate(cfg.weights):
                error = weight * math.sqrt(p * (1 - p) / n)
                self.assertLess(
                    abs(paths.dydx[:, i].mean() - expected[i]), 3 * error)

    def test_price_convergence(self) -> None:
        cfg = _basket([0.5, 0.5], [10.0, 20.0], 0.3)
        for level, z in enumerate(MONEYNESS):
            forwards = _forwards_at(cfg, z)
            expected = market.analytic_price(cfg, forwards)
            errors = []
            for n in (10 ** 4, 10 ** 5, 10 ** 6):
                payoffs = market.sample_paths(
                    cfg, forwards, n, seed=200 + level).y
                error = payoffs.std() / math.sqrt(n)
                self.assertLess(abs(payoffs.mean() - expected), 3 * error)
                errors.append(error)
            self.assertLess(errors[2], errors[0] / 5)

    def test_correlation_fidelity(self) -> None:
        correlation = [[1.0, 0.6, -0.3], [0.6, 1.0, 0.2], [-0.3, 0.2, 1.0]]
        cfg = BasketConfig(
            weights=[0.2, 0.3, 0.5], vols=[10.0, 15.0, 30.0],
            correlation=correlation, spot_box=[(90.0, 110.0)] * 3)
        increments = market.terminal_increments(cfg, 10 ** 6, seed=5)
        self.assertEqual(increments.shape, (10 ** 6, 3))
        np.testing.assert_allclose(
            np.corrcoef(increments.T), correlation, atol=0.01)
        np.testing.assert_allclose(
            increments.std(axis=0), [10.0, 15.0, 30.0], rtol=0.01)
        with self.assertRaises(ValueError):
            market.terminal_increments(cfg, 0, seed=5)

    def test_path_averaging(self) -> None:
        cfg = market.default_basket(m=2)
        single = market.sample(cfg, 4000, seed=6)
        averaged = market.sample(cfg, 4000, seed=6, paths=300)
        np.testing.assert_array_equal(single.x, averaged.x)
        self.assertTrue((averaged.y >= 0).all())
        self.assertTrue(((averaged.dydx >= 0) & (averaged.dydx <= 0.5)).all())
        price = market.analytic_price(cfg, single.x)
        delta = market.analytic_delta(cfg, single.x)
        self.assertLess(
            np.var(averaged.y - price), np.var(single.y - price) / 150)
        self.assertLess(
            np.var(averaged.dydx - delta), np.var(single.dydx - delta) / 150)
        with self.assertRaises(ValueError):
            market.sample(cfg, 10, seed=0, paths=0)
        with self.assertRaises(TypeError):
            market.sample(cfg, 10, seed=0, paths=2.0)

    def test_smoothed_targets(self) -> None:
        cfg = market.default_basket(m=1, smoothing_width=2.0)
        dataset = market.sample(cfg, 1000, seed=4)
        # x * sigmoid(x / w) dips below zero, never below w times the SiLU minimum.
        self.assertTrue((dataset.y >= 2.0 * interval.SILU_MIN - 1e-12).all())
        self.assertTrue((dataset.y < 0).any())
        slope = dataset.dydx[:, 0]
        self.assertTrue(
            ((slope >= interval.SILU_GRAD_MIN) & (slope <= interval.SILU_GRAD_MAX))
            .all())

    def test_singular_correlation(self) -> None:
        cfg = _basket([0.5, 0.5], [10.0, 10.0], 1.0)
        with self.assertRaises(MarketError):
            market.sample(cfg, 10, seed=0)


class DatasetTest(unittest.TestCase):
    """Tests the dataset container and its CSV format."""

    def test_validation(self) -> None:
        with self.assertRaises(ShapeError):
            Dataset(np.ones((3, 2)), np.ones(2), np.ones((3, 2)))
        with self.assertRaises(ShapeError):
            Dataset(np.ones((3, 2)), np.ones(3), np.ones((3, 1)))
        with self.assertRaises(ValueError):
            Dataset(np.ones((1, 1)), [np.inf], np.ones((1, 1)))

    def test_subset_and_hull(self) -> None:
        dataset = market.sample(market.default_basket(m=2), 100, seed=0)
        subset = dataset.subset(slice(0, 10))
        self.assertEqual(len(subset), 10)
        hull = dataset.hull()
        self.assertEqual(hull[0].lo, dataset.x[:, 0].min())
        self.assertEqual(hull[1].hi, dataset.x[:, 1].max())

    def test_csv(self) -> None:
        dataset = market.sample(market.default_basket(m=2), 300, seed=5)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "train.csv"
            market.write_dataset(dataset, path)
            restored = market.read_dataset(path)
            self.assertEqual(
                list(dataset.to_frame().columns),
                ["x_0", "x_1", "y", "dydx_0", "dydx_1"])
            np.testing.assert_array_equal(restored.x, dataset.x)
            np.testing.assert_array_equal(restored.y, dataset.y)
            np.testing.assert_array_equal(restored.dydx, dataset.dydx)
            bad = Path(directory) / "bad.csv"
            dataset.to_frame().rename(columns={"y": "value"}).to_csv(
                bad, index=False)
            with self.assertRaises(ShapeError):
                market.read_dataset(bad)
            with self.assertRaises(ArtifactError):
                market.read_dataset(Path(directory) / "missing.csv")

    def test_analytic_surrogate(self) -> None:
        cfg = market.default_basket(m=2)
        surrogate = market.AnalyticSurrogate(cfg)
        x = np.array([[95.0, 104.0], [100.0, 100.0]])
        np.testing.assert_array_equal(
            surrogate.predict(x), market.analytic_price(cfg, x))
        np.testing.assert_array_equal(
            surrogate.input_gradient(x), market.analytic_delta(cfg, x))


if __name__ == "__main__":
    unittest.main()
