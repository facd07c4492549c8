# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)

import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import __version__
from .attack import AttackConfig, attack_dataset
from .classifier import ModelParams, evaluate, predict_batch, train
from .defense import (
    DefenseOutcome,
    NegativePointSet,
    defend,
    direct_fine_tune,
    negative_points,
    policy_for_epsilon,
    prune,
    select_samples,
)
from .evaluation import (
    ComparisonReport,
    ComparisonRow,
    compare_arms,
    eps_tag,
    row_argmax_agreement,
)
from .exceptions import DataError, MissingArtifactError
from .explainer import ExplainerConfig, ShapTensor, explain_dataset, heatmap, point_sums
from .figures import export_figures, write_point_sums
from .formats import crc32, load_dataset, read_json, save_dataset, write_json
from .signals import Split, make_dataset
from .utils import ChecksumLedger

handler = logging.StreamHandler(sys.stdout)
handler.setLevel(logging.INFO)
formatter = logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
handler.setFormatter(formatter)
logging.basicConfig(level=logging.INFO, handlers=[handler])

_logger = logging.getLogger(__name__)

CLEAN_SPLITS = (Split.TINY_TRAIN, Split.TINY_TEST, Split.ADV_DATA)


def file_crc32(path):
    return crc32(Path(path).read_bytes())


class RunLock:
    """Exclusive ``.lock`` file in the output directory."""

    def __init__(self, root):
        self.path = Path(root) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(
                f"{self.path.parent} is in use by another run "
                f"(remove {self.path} if that run is gone)"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


class Workbench:
    """Produce the artifacts of every stage of a run in its output directory.

    A stage is skipped when its settings hash (``checksum.yml``) is unchanged
    and its outputs exist, unless ``force`` is set.
    """

    def __init__(self, config, force=False):
        self.config = config
        self.force = force
        self.root = Path(config.output_dir)
        self.ledger = ChecksumLedger(self.root)
        self._lock = RunLock(self.root)

    def __enter__(self):
        self._lock.__enter__()
        return self

    def __exit__(self, *exc):
        return self._lock.__exit__(*exc)

    # layout

    def dataset_path(self, split):
        return self.root / "datasets" / f"{Split(split).value}.amc"

    def model_path(self, name):
        return self.root / "models" / f"{name}.amcm"

    def attack_path(self, epsilon, split):
        return self.root / "attacks" / eps_tag(epsilon) / f"{Split(split).value}.amc"

    def shap_path(self, epsilon):
        return self.root / "shap" / eps_tag(epsilon) / "tiny_adv.amcs"

    def defense_dir(self, epsilon):
        return self.root / "defense" / eps_tag(epsilon)

    @property
    def reports_dir(self):
        return self.root / "reports"

    @property
    def figures_dir(self):
        return self.root / "figures"

    def epsilons(self, epsilon=None):
        return (float(epsilon),) if epsilon is not None else self.config.attack.epsilons

    # bookkeeping

    def _stage(self, stage, outputs, produce, epsilon=None):
        key = stage if epsilon is None else f"{stage}/{eps_tag(epsilon)}"
        digest = self.config.stage_hash(stage, epsilon)
        fresh = all(Path(p).exists() for p in outputs)
        if not self.force and fresh and not self.ledger.changed(key, digest):
            _logger.info("%s not changed: skipping", key)
            return False
        _logger.info("Running %s", key)
        produce()
        write_json(
            Path(outputs[0]).parent / f"{stage}.manifest.json",
            {
                "stage": stage,
                "epsilon": epsilon,
                "config_hash": digest,
                "config_source": self.config.source,
                "seed": self.config.seed,
                "version": __version__,
                "outputs": {
                    Path(p).name: {
                        "path": Path(p).relative_to(self.root).as_posix(),
                        "crc32": file_crc32(p),
                    }
                    for p in outputs
                },
            },
        )
        self.ledger.store(key, digest)
        self.ledger.save_checksum()
        return True

    def _provenance(self, stage, epsilon=None, **extra):
        tiny_train = self.dataset_path(Split.TINY_TRAIN)
        meta = read_json(tiny_train.with_suffix(".json")).get("metadata", {})
        return {
            "producer": stage,
            "seed": self.config.seed,
            "config_hash": self.config.stage_hash(stage, epsilon),
            "version": __version__,
            "dataset_checksum": file_crc32(tiny_train),
            "generator_hash": meta.get("generator_hash"),
            "master_seed": meta.get("master_seed"),
            **extra,
        }

    def load_split(self, split):
        path = self.dataset_path(split)
        if not path.exists():
            raise MissingArtifactError(path, "synth")
        return load_dataset(path)

    def load_attacked(self, epsilon, split):
        path = self.attack_path(epsilon, split)
        if not path.exists():
            raise MissingArtifactError(path, f"attack --epsilon {epsilon:g}")
        return load_dataset(path)

    def load_model(self, name="original", producer="train"):
        path = self.model_path(name)
        if not path.exists():
            raise MissingArtifactError(path, producer)
        return ModelParams.load(path)

    def load_shap(self, epsilon):
        path = self.shap_path(epsilon)
        if not path.exists():
            raise MissingArtifactError(path, f"explain --epsilon {epsilon:g}")
        return ShapTensor.load(path)

    # stages

    def synth(self):
        outputs = [self.dataset_path(split) for split in CLEAN_SPLITS]

        def produce():
            splits = make_dataset(self.config.dataset, self.config.workers)
            for split, dataset in splits.items():
                save_dataset(dataset, self.dataset_path(split))

        return self._stage("synth", outputs, produce)

    def train(self):
        path = self.model_path("original")
        history_path = path.with_name("original.history.json")

        def produce():
            tiny_train = self.load_split(Split.TINY_TRAIN)
            start = ModelParams.initialize(self.config.model, self.config.train.seed)
            params, history = train(start, tiny_train, self.config.train)
            params.save(path, self._provenance("train"))
            write_json(history_path, history.to_dict())

        return self._stage("train", [path, history_path], produce)

    def attack(self, epsilon=None):
        for eps in self.epsilons(epsilon):
            outputs = [self.attack_path(eps, s) for s in (Split.TINY_ADV, Split.ADV_DATA)]
            self._stage("attack", outputs, lambda eps=eps: self._attack(eps), eps)

    def _attack(self, epsilon):
        params = self.load_model()
        cfg = AttackConfig(epsilon)
        checksum = params.checksum()
        for split in (Split.TINY_TEST, Split.ADV_DATA):
            attacked = attack_dataset(
                params, self.load_split(split), cfg, workers=self.config.workers
            )
            attacked = attacked.replace(model_checksum=checksum)
            save_dataset(attacked, self.attack_path(epsilon, attacked.split_tag))

    def explain(self, epsilon=None):
        for eps in self.epsilons(epsilon):
            outputs = [self.shap_path(eps), self.shap_path(eps).with_name("point_sums.csv")]
            self._stage("explain", outputs, lambda eps=eps: self._explain(eps), eps)

    def _explain(self, epsilon):
        params = self.load_model()
        tiny_adv = self.load_attacked(epsilon, Split.TINY_ADV)
        settings = self.config.explainer
        cfg = ExplainerConfig(
            self.load_split(Split.TINY_TRAIN).samples,
            num_samples=settings.num_samples,
            seed=settings.seed,
            background_cap=settings.background_cap,
            batch_size=settings.batch_size,
        )
        shap = explain_dataset(params, tiny_adv, cfg, workers=self.config.workers)
        path = self.shap_path(epsilon)
        path.parent.mkdir(parents=True, exist_ok=True)
        shap.save(path)
        write_point_sums(
            path.with_name("point_sums.csv"), {epsilon: point_sums(shap, tiny_adv.targets)}
        )

    def defend(self, epsilon=None):
        for eps in self.epsilons(epsilon):
            out = self.defense_dir(eps)
            outputs = [out / "shap_ft.amcm", out / "points.json", out / "report.json"]
            self._stage("defend", outputs, lambda eps=eps: self._defend(eps), eps)

    def _defend(self, epsilon):
        params = self.load_model()
        outcome = defend(
            params,
            self.load_split(Split.TINY_TRAIN),
            self.load_attacked(epsilon, Split.TINY_ADV),
            self.load_shap(epsilon),
            self.load_attacked(epsilon, Split.ADV_DATA),
            epsilon,
            self.config.fine_tune,
            policy=self.config.defense.policy_override(),
            threshold=self.config.defense.threshold,
            clean_adv_data=self.load_split(Split.ADV_DATA),
        )
        self._save_defense(epsilon, outcome)

    def _save_defense(self, epsilon, outcome: DefenseOutcome):
        out = self.defense_dir(epsilon)
        model_path = out / "shap_ft.amcm"
        outcome.params.save(
            model_path,
            {**self._provenance("defend", epsilon), **outcome.params.provenance},
        )
        write_json(out / "points.json", outcome.points.to_dict())
        report = outcome.report
        report.artifacts = {
            name: path.relative_to(self.root).as_posix()
            for name, path in (
                ("model", model_path),
                ("points", out / "points.json"),
                ("shap", self.shap_path(epsilon)),
                ("tiny_adv", self.attack_path(epsilon, Split.TINY_ADV)),
                ("adv_data", self.attack_path(epsilon, Split.ADV_DATA)),
            )
        }
        write_json(out / "report.json", report.to_dict())

    def load_points(self, epsilon):
        path = self.defense_dir(epsilon) / "points.json"
        if not path.exists():
            raise MissingArtifactError(path, f"defend --epsilon {epsilon:g}")
        return NegativePointSet.from_dict(read_json(path))

    def direct_ft(self):
        path = self.model_path("direct_ft")

        def produce():
            tiny_train = self.load_split(Split.TINY_TRAIN)
            params, _ = direct_fine_tune(self.load_model(), tiny_train, self.config.fine_tune)
            params.save(path, self._provenance("direct_ft"))

        return self._stage("direct_ft", [path], produce)

    def compare(self, epsilon=None):
        self.direct_ft()
        for eps in self.epsilons(epsilon):
            outputs = [
                self.reports_dir / eps_tag(eps) / "comparison_row.json",
                self.model_path(f"at_fgsm_{eps_tag(eps)}"),
            ]
            self._stage("compare", outputs, lambda eps=eps: self._compare(eps), eps)
        rows = [
            ComparisonRow(**read_json(self.reports_dir / eps_tag(eps) / "comparison_row.json"))
            for eps in self.epsilons(epsilon)
        ]
        report = ComparisonReport(rows)
        write_json(self.reports_dir / "comparison.json", report.to_dict())
        return report

    def _compare(self, epsilon):
        at_path = self.model_path(f"at_fgsm_{eps_tag(epsilon)}")
        shap_ft = self.defense_dir(epsilon) / "shap_ft.amcm"
        if not shap_ft.exists():
            raise MissingArtifactError(shap_ft, f"defend --epsilon {epsilon:g}")
        row, at_fgsm, _ = compare_arms(
            self.load_model(),
            self.load_split(Split.TINY_TRAIN),
            self.load_split(Split.ADV_DATA),
            self.load_attacked(epsilon, Split.ADV_DATA),
            ModelParams.load(shap_ft),
            self.load_points(epsilon),
            epsilon,
            self.config.train,
            self.config.fine_tune,
            file_crc32(self.dataset_path(Split.ADV_DATA)),
            direct_ft=self.load_model("direct_ft", "compare"),
        )
        at_fgsm.save(at_path, self._provenance("compare", epsilon, arm="at_fgsm"))
        write_json(self.reports_dir / eps_tag(epsilon) / "comparison_row.json", asdict(row))

    def figures(self, epsilon=None):
        epsilons = self.epsilons(epsilon)
        chosen = self.config.figures.epsilon
        if chosen is None or float(chosen) not in epsilons:
            chosen = max(epsilons)
        chosen = float(chosen)
        outputs = [
            self.figures_dir / name
            for name in (
                "point_sums.csv",
                "heatmap.csv",
                "confusion_tiny_adv.csv",
                "confusion_adv_data.csv",
                "consistency.json",
            )
        ]
        return self._stage(
            "figures", outputs, lambda: self._figures(epsilons, chosen), epsilon
        )

    def _selected_sums(self, params, epsilon):
        tiny_adv = self.load_attacked(epsilon, Split.TINY_ADV)
        shap = self.load_shap(epsilon)
        predictions, _ = predict_batch(params, tiny_adv)
        policy = self.config.defense.policy_override() or policy_for_epsilon(
            epsilon, self.config.defense.threshold
        )
        selected = select_samples(shap, predictions, tiny_adv.targets, policy)
        if not len(selected):
            selected = np.arange(len(tiny_adv))
        return negative_points(shap, selected, tiny_adv.targets, policy).scores

    def _figures(self, epsilons, chosen):
        params = self.load_model()
        curves = {eps: self._selected_sums(params, eps) for eps in epsilons}
        tiny_adv = self.load_attacked(chosen, Split.TINY_ADV)
        adv_data = self.load_attacked(chosen, Split.ADV_DATA)
        shap = self.load_shap(chosen)
        tiny_eval = evaluate(params, tiny_adv)
        adv_eval = evaluate(params, adv_data)
        heat = heatmap(shap, tiny_eval.predictions, tiny_adv.targets)
        labels = [scheme.name for scheme in tiny_adv.classes]
        written = export_figures(
            self.figures_dir,
            curves,
            heat,
            tiny_eval.confusion,
            adv_eval.confusion,
            labels,
            svg=self.config.figures.svg,
        )
        heat_agree, heat_rows = row_argmax_agreement(heat, tiny_eval.confusion)
        adv_agree, adv_rows = row_argmax_agreement(tiny_eval.confusion, adv_eval.confusion)
        write_json(
            self.figures_dir / "consistency.json",
            {
                "epsilon": chosen,
                "heatmap_vs_confusion": {"agree": heat_agree, "rows": heat_rows},
                "tiny_adv_vs_adv_data": {"agree": adv_agree, "rows": adv_rows},
                "negative_sums": {
                    eps_tag(eps): bool(np.any(curve < 0)) for eps, curve in curves.items()
                },
                "files": written,
            },
        )

    def evaluate(self, model_path=None, dataset_path=None):
        """Accuracy of a model on a dataset after checking they belong together."""
        model_path = Path(model_path or self.model_path("original"))
        dataset_path = Path(dataset_path or self.dataset_path(Split.ADV_DATA))
        for path, producer in ((model_path, "train"), (dataset_path, "synth")):
            if not path.exists():
                raise MissingArtifactError(path, producer)
        params = ModelParams.load(model_path)
        dataset = check_compatible(params, load_dataset(dataset_path))
        result = evaluate(params, dataset)
        report = {
            "model": str(model_path),
            "model_checksum": params.checksum(),
            "dataset": str(dataset_path),
            "dataset_checksum": file_crc32(dataset_path),
            "seed": self.config.seed,
            **result.to_dict(),
        }
        name = f"evaluation_{model_path.stem}_{dataset_path.parent.name}_{dataset_path.stem}"
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        write_json(self.reports_dir / f"{name}.json", report)
        _logger.info("%s on %s: accuracy %.4f", model_path.name, dataset_path, result.accuracy)
        return report

    def pipeline(self, epsilon=None):
        self.synth()
        self.train()
        self.attack(epsilon)
        self.explain(epsilon)
        self.defend(epsilon)
        report = self.compare(epsilon)
        self.figures(epsilon)
        return report


def check_compatible(params, dataset):
    """``dataset`` ready for ``params`` (pruned like its training data), or DataError."""
    provenance = params.provenance
    metadata = dataset.metadata
    for key in ("generator_hash", "master_seed"):
        if (
            provenance.get(key) is not None
            and metadata.get(key) is not None
            and provenance[key] != metadata[key]
        ):
            raise DataError(
                f"model and dataset come from different generators "
                f"({key} {provenance[key]} != {metadata[key]})"
            )
    if params.config.num_classes != dataset.num_classes:
        raise DataError(
            f"model has {params.config.num_classes} classes, "
            f"dataset {dataset.num_classes}"
        )
    indices = provenance.get("pruned_indices")
    if not indices:
        return dataset
    pruned = metadata.get("pruned", {}).get("indices")
    if pruned is not None:
        if list(pruned) != list(indices):
            raise DataError("dataset was pruned at other points than the model's")
        return dataset
    generator = metadata.get("generator", {})
    length = generator.get("frame_length", dataset.frame_length)
    if dataset.frame_length != length:
        raise DataError(f"frame length {dataset.frame_length} matches neither pruning")
    points = NegativePointSet(indices, provenance.get("policy", "errors_only"), length)
    return prune(dataset, points)
