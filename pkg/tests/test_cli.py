# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)

import tempfile
from pathlib import Path
from unittest import TestCase

from click.testing import CliRunner

from amc_shapft.cli.main import cli
from amc_shapft.tools.formats import crc32
from amc_shapft.tools.utils import ConfLoader

from .common import conf_path


class TestCli(TestCase):
    def setUp(self):
        super().setUp()
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)
        conf = ConfLoader(conf_path).load_conf("micro")
        conf["output_dir"] = str(self.root / "run")
        self.config = self.root / "micro.yml"
        ConfLoader(self.root).save_conf(self.config, dict(conf))
        self.runner = CliRunner()

    def tearDown(self):
        self.temp_dir.cleanup()
        super().tearDown()

    def invoke(self, *args):
        return self.runner.invoke(cli, [*args, "--config", str(self.config)])

    def test_stage_order(self):
        result = self.invoke("train")
        self.assertEqual(result.exit_code, 2)
        self.assertEqual(self.invoke("synth").exit_code, 0)
        self.assertTrue((self.root / "run" / "datasets" / "tiny_train.amc").exists())
        self.assertEqual(self.invoke("train").exit_code, 0)
        result = self.invoke("evaluate")
        self.assertEqual(result.exit_code, 0)
        self.assertIn("accuracy", result.output)

    def test_pipeline(self):
        result = self.invoke("pipeline")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("eps_0.1", result.output)
        self.assertIn("shap_ft", result.output)
        self.assertTrue((self.root / "run" / "figures" / "consistency.json").exists())

    def test_synth_is_reproducible(self):
        datasets = self.root / "run" / "datasets"

        def checksums():
            return {p.name: crc32(p.read_bytes()) for p in sorted(datasets.glob("*.amc"))}

        self.assertEqual(self.invoke("synth", "--seed", "7").exit_code, 0)
        first = checksums()
        self.assertEqual(len(first), 3)
        result = self.invoke("synth", "--seed", "7", "--force")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertEqual(checksums(), first)

    def test_corrupted_model_is_a_data_error(self):
        self.assertEqual(self.invoke("synth").exit_code, 0)
        self.assertEqual(self.invoke("train").exit_code, 0)
        model = self.root / "run" / "models" / "original.amcm"
        data = bytearray(model.read_bytes())
        data[12] ^= 0xFF
        model.write_bytes(bytes(data))
        result = self.invoke("evaluate", "--model", str(model))
        self.assertEqual(result.exit_code, 2)

    def test_bad_configuration(self):
        result = self.runner.invoke(
            cli, ["synth", "--config", str(conf_path / "bad_key.yml")]
        )
        self.assertEqual(result.exit_code, 1)
        result = self.runner.invoke(cli, ["synth", "--config", str(self.root / "none.yml")])
        self.assertEqual(result.exit_code, 1)

    def test_usage_error(self):
        self.assertEqual(self.runner.invoke(cli, ["synth"]).exit_code, 1)
        self.assertEqual(self.runner.invoke(cli, ["nope"]).exit_code, 1)
        self.assertEqual(self.invoke("attack", "--epsilon", "many").exit_code, 1)
