# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)

import dataclasses
import tempfile
from pathlib import Path
from unittest import TestCase

from amc_shapft.tools.classifier import ModelConfig, ModelParams
from amc_shapft.tools.exceptions import DataError, MissingArtifactError
from amc_shapft.tools.formats import load_dataset, read_json
from amc_shapft.tools.runner import RunLock, Workbench, check_compatible
from amc_shapft.tools.signals import Split
from amc_shapft.tools.utils import RunConfig

from .common import micro_conf, random_dataset


def micro_config(output_dir, **changes):
    config = RunConfig.load(micro_conf)
    return dataclasses.replace(config, output_dir=str(output_dir), **changes)


class TestWorkbenchPipeline(TestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.temp_dir = tempfile.TemporaryDirectory()
        cls.root = Path(cls.temp_dir.name)
        cls.config = micro_config(cls.root)
        with Workbench(cls.config) as bench:
            cls.report = bench.pipeline()

    @classmethod
    def tearDownClass(cls):
        cls.temp_dir.cleanup()
        super().tearDownClass()

    def test_layout(self):
        for relative in (
            "datasets/tiny_train.amc",
            "datasets/tiny_test.amc",
            "datasets/adv_data.amc",
            "models/original.amcm",
            "models/direct_ft.amcm",
            "models/at_fgsm_eps_0.1.amcm",
            "attacks/eps_0.1/tiny_adv.amc",
            "attacks/eps_0.1/adv_data.amc",
            "shap/eps_0.1/tiny_adv.amcs",
            "defense/eps_0.1/shap_ft.amcm",
            "defense/eps_0.1/points.json",
            "reports/comparison.json",
            "figures/point_sums.csv",
            "figures/consistency.json",
            "checksum.yml",
        ):
            self.assertTrue((self.root / relative).exists(), relative)
        self.assertFalse((self.root / ".lock").exists())
        # figures.svg is off in the micro configuration
        self.assertFalse(list((self.root / "figures").glob("*.svg")))

    def test_comparison(self):
        self.assertEqual([row.epsilon for row in self.report.rows], [0.1])
        data = read_json(self.root / "reports" / "comparison.json")
        self.assertEqual(data["rows"][0]["seed"], 3)
        self.assertEqual(data["rows"][0]["policy"], "all_samples")

    def test_manifest(self):
        manifest = read_json(self.root / "attacks" / "eps_0.1" / "attack.manifest.json")
        self.assertEqual(manifest["epsilon"], 0.1)
        self.assertEqual(manifest["config_hash"], self.config.stage_hash("attack", 0.1))
        self.assertEqual(
            manifest["outputs"]["tiny_adv.amc"]["path"], "attacks/eps_0.1/tiny_adv.amc"
        )

    def test_attacked_datasets(self):
        tiny_adv = load_dataset(self.root / "attacks" / "eps_0.1" / "tiny_adv.amc")
        self.assertEqual(tiny_adv.split_tag, Split.TINY_ADV)
        self.assertEqual(tiny_adv.metadata["attack"]["epsilon"], 0.1)
        self.assertEqual(len(tiny_adv), 4)

    def test_defense_artifacts(self):
        report = read_json(self.root / "defense" / "eps_0.1" / "report.json")
        points = read_json(self.root / "defense" / "eps_0.1" / "points.json")
        self.assertEqual(report["m"], points["m"])
        self.assertEqual(report["pruned_length"], 32 - report["m"])
        model = ModelParams.load(self.root / "defense" / "eps_0.1" / "shap_ft.amcm")
        self.assertEqual(model.provenance["pruned_indices"], points["indices"])
        self.assertEqual(model.provenance["seed"], 3)
        self.assertEqual(model.provenance["epsilon"], 0.1)
        self.assertEqual(model.provenance["producer"], "defend")
        self.assertEqual(model.provenance["config_hash"], self.config.stage_hash("defend", 0.1))

    def test_comparison_row_per_epsilon(self):
        row = read_json(self.root / "reports" / "eps_0.1" / "comparison_row.json")
        self.assertEqual(row["epsilon"], 0.1)

    def test_rerun_skips(self):
        with Workbench(self.config) as bench:
            with self.assertLogs("amc_shapft.tools.runner", "INFO") as logs:
                self.assertFalse(bench.synth())
                self.assertFalse(bench.train())
                bench.attack()
        self.assertIn("synth not changed: skipping", "\n".join(logs.output))
        self.assertIn("attack/eps_0.1 not changed: skipping", "\n".join(logs.output))

    def test_evaluate_defended_model_on_unpruned_frames(self):
        with Workbench(self.config) as bench:
            result = bench.evaluate(
                self.root / "defense" / "eps_0.1" / "shap_ft.amcm",
                self.root / "attacks" / "eps_0.1" / "adv_data.amc",
            )
        report = read_json(self.root / "defense" / "eps_0.1" / "report.json")
        self.assertAlmostEqual(result["accuracy"], report["accuracies"]["defended"])
        self.assertTrue(
            (self.root / "reports" / "evaluation_shap_ft_eps_0.1_adv_data.json").exists()
        )


class TestWorkbench(TestCase):
    def setUp(self):
        super().setUp()
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()
        super().tearDown()

    def test_missing_upstream(self):
        with Workbench(micro_config(self.root)) as bench:
            with self.assertRaises(MissingArtifactError) as ctx:
                bench.train()
        self.assertIn("amc-shapft synth", str(ctx.exception))
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_lock(self):
        with RunLock(self.root):
            self.assertTrue((self.root / ".lock").exists())
            with self.assertRaises(DataError) as ctx:
                Workbench(micro_config(self.root)).__enter__()
            self.assertIn("in use", str(ctx.exception))
        self.assertFalse((self.root / ".lock").exists())

    def test_check_compatible(self):
        data = random_dataset(count=4, length=8)
        params = ModelParams.initialize(ModelConfig(4, 3, 4, 6, 2))
        self.assertIs(check_compatible(params, data), data)
        params.provenance = {"generator_hash": "other"}
        with self.assertRaises(DataError):
            check_compatible(params, data)
        params.provenance = {"pruned_indices": [1, 2]}
        pruned = check_compatible(params, data)
        self.assertEqual(pruned.frame_length, 6)
        wide = ModelParams.initialize(ModelConfig(4, 3, 4, 6, 3))
        with self.assertRaises(DataError):
            check_compatible(wide, data)
