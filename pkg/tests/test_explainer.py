# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)

import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np

from amc_shapft.tools import autodiff as ad
from amc_shapft.tools.exceptions import ContractError
from amc_shapft.tools.explainer import (
    AffineModel,
    CoalitionValueFn,
    ExplainerConfig,
    ShapTensor,
    background_frames,
    class_gradients,
    exact_shapley,
    expected_gradients,
    explain_dataset,
    heatmap,
    integrated_gradients,
    point_sums,
)
from amc_shapft.tools.signals import Split

from .common import micro_params, random_dataset


class Float64Case(TestCase):
    def setUp(self):
        super().setUp()
        self._precision = ad.precision("float64")
        self._precision.__enter__()
        rng = np.random.default_rng(1)
        self.weights = rng.normal(size=(6, 2, 3))
        self.model = AffineModel(self.weights, bias=[0.5, -1.0, 2.0])
        self.frame = rng.normal(size=(6, 2))
        self.baseline = rng.normal(size=(6, 2))

    def tearDown(self):
        self._precision.__exit__(None, None, None)
        super().tearDown()


class TestAffineOracles(Float64Case):
    def test_affine_model(self):
        logits = self.model(self.frame[None]).data[0]
        expected = np.einsum("tc,tck->k", self.frame, self.weights) + [0.5, -1.0, 2.0]
        np.testing.assert_allclose(logits, expected)
        with self.assertRaises(ContractError):
            self.model(np.zeros((1, 5, 2)))

    def test_class_gradients_are_weights(self):
        grads = class_gradients(self.model, np.stack([self.frame, self.baseline]), [2, 0])
        np.testing.assert_allclose(grads[0], self.weights[..., 2])
        np.testing.assert_allclose(grads[1], self.weights[..., 0])

    def test_integrated_gradients_exact(self):
        phi = integrated_gradients(self.model, self.frame, self.baseline, 1, steps=3)
        np.testing.assert_allclose(phi, self.weights[..., 1] * (self.frame - self.baseline))

    def test_expected_gradients_single_background(self):
        cfg = ExplainerConfig(self.baseline[None], num_samples=5, seed=3)
        phi = expected_gradients(self.model, self.frame, cfg, 0)
        np.testing.assert_allclose(phi, self.weights[..., 0] * (self.frame - self.baseline))

    def test_expected_gradients_completeness(self):
        background = np.random.default_rng(2).normal(size=(4, 6, 2))
        cfg = ExplainerConfig(background, num_samples=4000, seed=0)
        phi = expected_gradients(self.model, self.frame, cfg, 2, frame_index=7)
        # for an affine model each draw is exact, only the baseline draw varies
        f = self.model(np.concatenate([self.frame[None], background])).data[:, 2]
        self.assertAlmostEqual(phi.sum(), f[0] - f[1:].mean(), delta=0.3)

    def test_exact_shapley_matches_affine(self):
        model = AffineModel(self.weights[:3], bias=[0.5, -1.0, 2.0])
        value_fn = CoalitionValueFn(model, self.frame[:3], self.baseline[:3], 1)
        phi = exact_shapley(value_fn)
        expected = (self.weights[:3, :, 1] * (self.frame[:3] - self.baseline[:3])).reshape(-1)
        np.testing.assert_allclose(phi, expected, atol=1e-9)

    def test_deterministic_streams(self):
        background = np.random.default_rng(2).normal(size=(8, 6, 2))
        cfg = ExplainerConfig(background, num_samples=16, seed=5)
        first = expected_gradients(self.model, self.frame, cfg, 1, frame_index=2)
        again = expected_gradients(self.model, self.frame, cfg, 1, frame_index=2)
        other = expected_gradients(self.model, self.frame, cfg, 1, frame_index=3)
        np.testing.assert_array_equal(first, again)
        self.assertFalse(np.allclose(first, other))


class TestExactShapley(TestCase):
    def test_symmetric_game(self):
        phi = exact_shapley(lambda mask: float(np.sum(mask)) ** 2, n=4)
        np.testing.assert_allclose(phi, [4.0] * 4)

    def test_dummy_player(self):
        phi = exact_shapley(lambda mask: float(mask[0] and mask[1]), n=3)
        np.testing.assert_allclose(phi, [0.5, 0.5, 0.0])

    def test_limits(self):
        with self.assertRaises(ContractError):
            exact_shapley(lambda mask: 0.0, n=13)
        with self.assertRaises(ContractError):
            exact_shapley(lambda mask: 0.0, n=0)

    def test_efficiency_on_classifier(self):
        with ad.precision("float64"):
            params = micro_params(seed=3)
            params.tensors = {k: v.astype(np.float64) for k, v in params.tensors.items()}
            rng = np.random.default_rng(4)
            frame, baseline = rng.normal(size=(8, 2)), np.zeros((8, 2))
            # one player per pair of timesteps (I and Q together)
            groups = [[4 * p, 4 * p + 1, 4 * p + 2, 4 * p + 3] for p in range(4)]
            value_fn = CoalitionValueFn(params, frame, baseline, 1, groups=groups)
            phi = exact_shapley(value_fn)
            full = value_fn(np.ones(4, dtype=bool))
            empty = value_fn(np.zeros(4, dtype=bool))
        self.assertEqual(len(phi), 4)
        self.assertAlmostEqual(phi.sum(), full - empty, places=9)


class TestExplainDataset(TestCase):
    def setUp(self):
        super().setUp()
        self.params = micro_params(seed=1)
        self.train = random_dataset(count=6, length=10, seed=1)
        self.adv = random_dataset(count=3, length=10, seed=2, split=Split.TINY_ADV)
        self.adv = self.adv.replace(attack={"epsilon": 0.1, "source_split": "tiny_test"})
        self.cfg = ExplainerConfig(self.train.samples, num_samples=4, seed=9, batch_size=3)

    def test_shape_and_provenance(self):
        shap = explain_dataset(self.params, self.adv, self.cfg)
        self.assertEqual(shap.shape, (3, 10, 2, 2))
        self.assertEqual(shap.values.dtype, np.float32)
        self.assertEqual(shap.model_checksum, self.params.checksum())
        self.assertEqual(shap.provenance["num_samples"], 4)
        self.assertEqual(shap.provenance["split"], "tiny_adv")
        self.assertEqual(shap.provenance["attack"]["epsilon"], 0.1)

    def test_workers_do_not_change_values(self):
        serial = explain_dataset(self.params, self.adv, self.cfg, workers=1)
        threaded = explain_dataset(self.params, self.adv, self.cfg, workers=3)
        np.testing.assert_array_equal(serial.values, threaded.values)

    def test_save_load(self):
        shap = explain_dataset(self.params, self.adv, self.cfg)
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "tiny_adv.amcs"
            shap.save(path)
            loaded = ShapTensor.load(path)
        np.testing.assert_array_equal(loaded.values, shap.values)
        self.assertEqual(loaded.model_checksum, shap.model_checksum)
        self.assertEqual(loaded.provenance["seed"], 9)

    def test_background(self):
        data = random_dataset(count=10, length=4)
        np.testing.assert_array_equal(background_frames(data, cap=20), data.samples)
        capped = background_frames(data, cap=4, seed=1)
        self.assertEqual(len(capped), 4)
        np.testing.assert_array_equal(capped, background_frames(data, cap=4, seed=1))
        with self.assertRaises(ContractError):
            ExplainerConfig(np.zeros((0, 4, 2)))
        with self.assertRaises(ContractError):
            expected_gradients(self.params, np.zeros((7, 2)), self.cfg, 0)


class TestAggregates(TestCase):
    def setUp(self):
        super().setUp()
        values = np.zeros((3, 4, 2, 2))
        values[0, :, :, 0] = 1.0  # class 0 frame, explained for class 0
        values[1, 1, 0, 1] = -2.0  # class 1 frame
        values[2, 2, 1, 1] = 3.0
        values[2, 0, 0, 0] = 5.0
        self.shap = ShapTensor(values)
        self.labels = np.array([0, 1, 1])

    def test_point_sums(self):
        sums = point_sums(self.shap, self.labels)
        np.testing.assert_allclose(sums, [2.0, 0.0, 5.0, 2.0])
        sums = point_sums(self.shap, self.labels, selected=[1])
        np.testing.assert_allclose(sums, [0.0, -2.0, 0.0, 0.0])
        with self.assertRaises(ContractError):
            point_sums(self.shap, self.labels[:2])

    def test_heatmap(self):
        matrix = heatmap(self.shap, predictions=[0, 1, 0], true_labels=self.labels)
        # frame 2 is class 1 predicted as 0: its class-0 attributions sum to 5
        np.testing.assert_allclose(matrix, [[8.0, 0.0], [5.0, -2.0]])
