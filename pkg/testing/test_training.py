"""Tests the `training` module of the library."""
import math
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

sys.path.append(".")
from sobolprune import market, network, training
from sobolprune.exceptions import MetricError, NumericalError
from sobolprune.market import Dataset
from sobolprune.training import OneCycleConfig, SobolevConfig


GENTLE = OneCycleConfig(peak_lr=1e-2, start_lr=1e-3, final_lr=1e-5)


def _price_dataset(n: int, seed: int) -> Dataset:
    # Clean prices and Deltas of a one-asset basket.
    cfg = market.default_basket(m=1)
    inputs = training.uniform_inputs(cfg.spot_box, n, seed)
    return training.network_dataset(market.AnalyticSurrogate(cfg), inputs)


class ScheduleTest(unittest.TestCase):
    """Tests the one-cycle learning rate schedule."""

    def test_boundaries(self) -> None:
        cfg = OneCycleConfig(total_steps=1000)
        self.assertAlmostEqual(training.lr_at(cfg, 0), 4e-3, 12)
        self.assertAlmostEqual(training.lr_at(cfg, 300), 0.1, 12)
        self.assertAlmostEqual(training.lr_at(cfg, 1000), 1e-5, 12)
        self.assertAlmostEqual(training.lr_at(cfg, 150), 0.052, 12)
        rates = [training.lr_at(cfg, step) for step in range(1001)]
        self.assertEqual(max(rates), rates[300])
        self.assertTrue(all(a <= b for a, b in zip(rates[:300], rates[1:301])))
        self.assertTrue(all(a >= b for a, b in zip(rates[300:], rates[301:])))

    def test_errors(self) -> None:
        with self.assertRaises(ValueError):
            training.lr_at(OneCycleConfig(), 0)
        cfg = OneCycleConfig(total_steps=10)
        for step in (-1, 11):
            with self.assertRaises(ValueError):
                training.lr_at(cfg, step)
        with self.assertRaises(TypeError):
            training.lr_at(cfg, 1.5)
        for kwargs in (
            dict(start_lr=0.2), dict(final_lr=0.0), dict(rise_fraction=1.0),
            dict(total_steps=0)
        ):
            with self.assertRaises(ValidationError):
                OneCycleConfig(**kwargs)

    def test_finetune_schedule(self) -> None:
        cfg = training.finetune_schedule()
        self.assertEqual(
            (cfg.peak_lr, cfg.start_lr, cfg.final_lr), (2e-3, 8e-5, 2e-7))

    def test_default_shapes(self) -> None:
        # Every shipped cycle keeps start = peak / 25 and final = peak / 1e4.
        for cfg in (
            OneCycleConfig(), training.baseline_schedule(),
            training.finetune_schedule(), training.retrain_schedule()
        ):
            self.assertAlmostEqual(cfg.peak_lr / cfg.start_lr, 25, 9)
            self.assertAlmostEqual(cfg.peak_lr / cfg.final_lr, 1e4, 6)
        self.assertGreater(
            training.baseline_schedule().peak_lr,
            training.retrain_schedule().peak_lr)


class AdamTest(unittest.TestCase):
    """Tests the optimiser."""

    def test_first_step(self) -> None:
        params = [np.zeros(3)]
        state = training.AdamState.zeros(params)
        updated, state = training.adam_step(state, params, [np.ones(3)], 0.1)
        np.testing.assert_allclose(updated[0], -0.1 / (1 + 1e-8), rtol=1e-14)
        self.assertEqual(state.step, 1)
        np.testing.assert_array_equal(params[0], 0)

    def test_non_finite_gradient(self) -> None:
        params = [np.zeros(2)]
        state = training.AdamState.zeros(params)
        with self.assertRaises(NumericalError):
            training.adam_step(state, params, [np.array([1.0, np.nan])], 0.1)

    def test_minimises_quadratic(self) -> None:
        params = [np.array([3.0, -2.0])]
        state = training.AdamState.zeros(params)
        for _ in range(2000):
            params, state = training.adam_step(state, params, [2 * params[0]], 0.01)
        np.testing.assert_allclose(params[0], 0, atol=5e-2)


class LossTest(unittest.TestCase):
    """Tests the value and Sobolev losses."""

    def setUp(self) -> None:
        self.model = network.init_model(2, [6, 5], "silu", seed=1)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(16, 2))
        self.batch = Dataset(x, rng.normal(size=16), rng.normal(size=(16, 2)))

    def assert_gradients(self, loss) -> None:
        # Compares the loss gradient with central differences.
        scales = training.loss_scales(self.batch)
        result = loss(self.model, scales)
        params = network.parameters(self.model)
        h = 1e-6
        for i, param in enumerate(params):
            for index in list(np.ndindex(param.shape))[:4]:
                up = [p.copy() for p in params]
                down = [p.copy() for p in params]
                up[i][index] += h
                down[i][index] -= h
                difference = (
                    loss(network.with_parameters(self.model, up), scales).loss
                    - loss(network.with_parameters(self.model, down), scales).loss
                ) / (2 * h)
                self.assertAlmostEqual(
                    result.gradients[i][index], difference, delta=1e-6)

    def test_mse_gradient(self) -> None:
        self.assert_gradients(
            lambda model, scales: training.mse_loss(model, self.batch, scales))

    def test_sobolev_gradient(self) -> None:
        self.assert_gradients(
            lambda model, scales: training.sobolev_loss(
                model, self.batch, 0.7, scales))

    def test_sobolev_gradient_random_nets(self) -> None:
        rng = np.random.default_rng(20)
        h = 1e-5
        for seed in range(20):
            m = int(rng.integers(1, 4))
            widths = [int(w) for w in rng.integers(2, 7, size=rng.integers(1, 4))]
            model = network.init_model(m, widths, "silu", seed=seed)
            batch = Dataset(
                rng.normal(size=(12, m)), rng.normal(size=12),
                rng.normal(size=(12, m)))
            scales = training.loss_scales(batch)
            lam = float(rng.uniform(0.1, 2.0))

            def loss(params):
                return training.sobolev_loss(
                    network.with_parameters(model, params), batch, lam, scales)

            params = network.parameters(model)
            analytic = np.concatenate(
                [g.ravel() for g in loss(params).gradients])
            differences = []
            for i, param in enumerate(params):
                for index in np.ndindex(param.shape):
                    up = [p.copy() for p in params]
                    down = [p.copy() for p in params]
                    up[i][index] += h
                    down[i][index] -= h
                    differences.append(
                        (loss(up).loss - loss(down).loss) / (2 * h))
            differences = np.array(differences)
            error = np.linalg.norm(analytic - differences)
            self.assertLess(
                error / np.linalg.norm(differences), 1e-5, f"net {seed}")

    def test_lambda_zero_is_mse(self) -> None:
        mse = training.mse_loss(self.model, self.batch)
        sobolev = training.sobolev_loss(self.model, self.batch, 0.0)
        self.assertEqual(mse.loss, sobolev.loss)
        for a, b in zip(mse.gradients, sobolev.gradients):
            np.testing.assert_array_equal(a, b)
        with self.assertRaises(ValueError):
            training.sobolev_loss(self.model, self.batch, -1.0)

    def test_terms(self) -> None:
        result = training.sobolev_loss(self.model, self.batch, 2.0)
        self.assertAlmostEqual(
            result.loss, result.value_loss + 2.0 * result.derivative_loss, 12)
        predictions = network.forward(self.model, self.batch.x)
        self.assertAlmostEqual(
            result.value_loss,
            np.mean((predictions - self.batch.y) ** 2) / np.var(self.batch.y),
            12)
        gradient = network.input_gradient(self.model, self.batch.x)
        expected = np.mean(
            (gradient - self.batch.dydx) ** 2 / np.var(self.batch.dydx, axis=0))
        self.assertAlmostEqual(result.derivative_loss, expected, 12)

    def test_perfect_model(self) -> None:
        inputs = np.random.default_rng(2).normal(size=(32, 2))
        exact = training.network_dataset(self.model, inputs)
        result = training.sobolev_loss(self.model, exact, 1.0)
        self.assertAlmostEqual(result.loss, 0, 20)
        for gradient in result.gradients:
            np.testing.assert_allclose(gradient, 0, atol=1e-12)

    def test_unnormalised_scales(self) -> None:
        scales = training.loss_scales(self.batch, normalise=False)
        self.assertEqual(scales.value, 1)
        np.testing.assert_array_equal(scales.derivative, [1, 1])


class TrainTest(unittest.TestCase):
    """Tests the training loops."""

    def test_lambda_zero_matches_mse_training(self) -> None:
        dataset = _price_dataset(200, seed=0)
        start = network.init_model(1, [8, 8], "silu", seed=0)
        mse, mse_log = training.train_mse(
            start, dataset, GENTLE, epochs=3, seed=5, batch_size=32)
        sobolev, sobolev_log = training.train_sobolev(
            start, dataset, SobolevConfig(lam=0.0, epochs=3, batch_size=32),
            GENTLE, seed=5)
        self.assertEqual(network.fingerprint(mse), network.fingerprint(sobolev))
        pd.testing.assert_frame_equal(mse_log.to_frame(), sobolev_log.to_frame())

    def test_mse_training_learns_prices(self) -> None:
        dataset = _price_dataset(512, seed=1)
        start = network.init_model(1, [16, 16], "silu", seed=1)
        trained, log = training.train_mse(
            start, dataset, GENTLE, epochs=40, seed=1, batch_size=64)
        self.assertEqual(len(log), 40)
        self.assertLess(log.final_loss, log.records[0].train_loss)
        held_out = _price_dataset(256, seed=2)
        self.assertGreater(
            training.r2_score(trained.predict(held_out.x), held_out.y), 0.95)
        self.assertIsNone(start.scaling)
        self.assertIsNotNone(trained.scaling)

    def test_sobolev_training_reduces_loss(self) -> None:
        datasets = [_price_dataset(128, seed=epoch) for epoch in range(10)]
        start = network.init_model(1, [8, 8], "silu", seed=2)
        trained, log = training.train_sobolev(
            start, lambda epoch: datasets[epoch],
            SobolevConfig(lam=1.0, epochs=10, batch_size=32), GENTLE, seed=2)
        self.assertLess(log.final_loss, log.records[0].train_loss)
        self.assertGreater(log.records[0].deriv_loss, 0)
        self.assertFalse(trained.requires_retraining)

    def test_zero_epochs(self) -> None:
        dataset = _price_dataset(50, seed=0)
        start = network.init_model(1, [4], seed=0)
        trained, log = training.train_mse(start, dataset, GENTLE, epochs=0)
        self.assertEqual(len(log), 0)
        self.assertIsNone(log.final_loss)
        np.testing.assert_array_equal(
            network.parameters(trained)[0], network.parameters(start)[0])

    def test_divergence(self) -> None:
        dataset = _price_dataset(64, seed=0)
        start = network.init_model(1, [4], seed=0)
        huge = OneCycleConfig(peak_lr=1e300, start_lr=1e300, final_lr=1e300)
        with np.errstate(all="ignore"):
            with self.assertRaises(NumericalError):
                training.train_mse(
                    start, dataset, huge, epochs=3, batch_size=16)

    def test_log_csv(self) -> None:
        dataset = _price_dataset(64, seed=0)
        _, log = training.train_mse(
            network.init_model(1, [4], seed=0), dataset, GENTLE, epochs=2,
            batch_size=16)
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "log.csv"
            log.write_csv(path)
            frame = pd.read_csv(path)
        self.assertEqual(
            list(frame.columns),
            ["epoch", "lr", "train_loss", "value_loss", "deriv_loss"])
        self.assertEqual(list(frame["epoch"]), [0, 1])

    def test_train_from_scratch(self) -> None:
        dataset = _price_dataset(64, seed=0)
        models, summary = training.train_from_scratch(
            [4, 2], "silu", dataset, GENTLE, 2, [0, 1],
            lambda model: training.r2_score(model.predict(dataset.x), dataset.y),
            batch_size=32)
        self.assertEqual(len(models), 2)
        self.assertEqual([model.hidden_widths for model in models], [[4, 2]] * 2)
        self.assertEqual(len(summary.scores), 2)
        self.assertAlmostEqual(summary.mean, np.mean(summary.scores))

    def test_fit_scaling(self) -> None:
        dataset = Dataset(
            np.array([[1.0, 5.0], [3.0, 5.0]]), [2.0, 2.0], np.zeros((2, 2)))
        scaling = training.fit_scaling(dataset)
        np.testing.assert_array_equal(scaling.x_mean, [2, 5])
        np.testing.assert_array_equal(scaling.x_std, [1, 1])
        self.assertEqual((scaling.y_mean, scaling.y_std), (2, 1))


class MetricTest(unittest.TestCase):
    """Tests R² and the evaluation against the analytic oracle."""

    def test_r2_score(self) -> None:
        self.assertEqual(training.r2_score([1, 2, 3], [1, 2, 3]), 1)
        self.assertAlmostEqual(training.r2_score([1, 2, 4], [1, 2, 3]), 0.5, 12)
        self.assertAlmostEqual(training.r2_score([2, 2, 2], [1, 2, 3]), 0, 12)
        with self.assertRaises(MetricError):
            training.r2_score([1, 2], [1, 2, 3])
        with self.assertRaises(MetricError):
            training.r2_score([1], [1])
        with self.assertRaises(MetricError):
            training.r2_score([1, 2], [3, 3])

    def test_evaluate_oracle(self) -> None:
        cfg = market.default_basket(m=3)
        report, frame = training.evaluate(
            market.AnalyticSurrogate(cfg), cfg, grid_size=64)
        self.assertEqual(report.values_r2, 1)
        self.assertEqual(report.deltas_r2, 1)
        self.assertAlmostEqual(report.gammas_r2, 1, 6)
        self.assertEqual(report.grid, 64)
        self.assertEqual(len(frame), 64)
        self.assertEqual(
            list(frame.columns),
            ["spot", "value_true", "value_pred", "delta_true", "delta_pred",
             "gamma_true", "gamma_pred"])
        np.testing.assert_allclose(frame["delta_pred"], frame["delta_true"])
        self.assertAlmostEqual(frame["spot"].iloc[0], 90, 10)
        self.assertEqual(set(report.to_dict()), {
            "values_r2", "deltas_r2", "gammas_r2", "grid"})

    def test_evaluation_grid(self) -> None:
        cfg = market.default_basket(m=2)
        points, direction = training.evaluation_grid(cfg, 5)
        np.testing.assert_allclose(points[:, 0], [90, 95, 100, 105, 110])
        np.testing.assert_array_equal(direction, [20, 20])
        with self.assertRaises(MetricError):
            training.evaluation_grid(cfg, 1)
        flat = market.default_basket(m=2, box=(100.0, 100.0))
        with self.assertRaises(MetricError):
            training.evaluate(market.AnalyticSurrogate(flat), flat, 8)


if __name__ == "__main__":
    unittest.main()
