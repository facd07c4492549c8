# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""Negative-point pruning and fine-tuning (SHAP-FT).

Stages:
    1. explainer background from tiny_train
    2. attack tiny_test into tiny_adv and explain it
    3. sum the true-class attributions per timestep; negative sums are
       negative points
    4. delete those timesteps from tiny_train and from the attacked adv_data
    5. fine-tune the original model on the pruned tiny_train
    6. classify the pruned adv_data with the new model
"""

import enum
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .attack import AttackConfig, attack_dataset
from .classifier import EarlyStopping, TrainConfig, evaluate, predict_batch, resize_head, train
from .exceptions import ConfigurationError, ContractError, DataError
from .explainer import ExplainerConfig, ShapTensor, explain_dataset, point_sums
from .signals import Split

_logger = logging.getLogger(__name__)

POLICY_THRESHOLD = 0.06


class Policy(str, enum.Enum):
    ERRORS_ONLY = "errors_only"
    ALL_SAMPLES = "all_samples"


def policy_for_epsilon(epsilon, threshold=POLICY_THRESHOLD):
    """Weak attacks explain every frame, strong ones only the misclassified."""
    return Policy.ALL_SAMPLES if epsilon < threshold else Policy.ERRORS_ONLY


@dataclass
class NegativePointSet:
    indices: np.ndarray
    policy: Policy
    frame_length: int
    source: dict = field(default_factory=dict)
    scores: np.ndarray = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.policy = Policy(self.policy)
        if self.indices.ndim != 1 or np.any(np.diff(self.indices) <= 0):
            raise ContractError("negative points must be strictly increasing")
        if len(self.indices) and (self.indices[0] < 0 or self.indices[-1] >= self.frame_length):
            raise ContractError(
                f"negative point outside [0, {self.frame_length}): {self.indices.tolist()}"
            )

    @property
    def m(self):
        return len(self.indices)

    def to_dict(self):
        return {
            "indices": self.indices.tolist(),
            "m": self.m,
            "policy": self.policy.value,
            "frame_length": self.frame_length,
            "source": self.source,
            "scores": None if self.scores is None else self.scores.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        scores = data.get("scores")
        return cls(
            data["indices"],
            data["policy"],
            data["frame_length"],
            data.get("source", {}),
            None if scores is None else np.asarray(scores),
        )


@dataclass
class FineTuneConfig:
    epochs: int = 50
    batch_size: int = 20
    fc1_units: int = 128
    patience: int = 5
    monitor: str = "val_loss"
    learning_rate: float = 0.001
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("fine_tune.epochs must be >= 0")
        for name in ("batch_size", "fc1_units", "patience"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"fine_tune.{name} must be >= 1")

    def to_dict(self):
        return asdict(self)

    def train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            validation_fraction=self.validation_fraction,
            early_stopping=EarlyStopping(True, self.patience, self.monitor),
            seed=self.seed,
        )


def select_samples(shap, predictions, true_labels, policy):
    """Indices of the frames whose attributions define the negative points."""
    predictions, true_labels = np.asarray(predictions), np.asarray(true_labels)
    count = len(shap.values) if isinstance(shap, ShapTensor) else len(shap)
    if not count == len(predictions) == len(true_labels):
        raise ContractError("attributions, predictions and labels must have the same length")
    if Policy(policy) is Policy.ALL_SAMPLES:
        return np.arange(count)
    return np.flatnonzero(predictions != true_labels)


def negative_points(shap, selected, true_labels, policy=Policy.ERRORS_ONLY, source=None):
    """Timesteps whose summed true-class attribution over ``selected`` is negative."""
    selected = np.asarray(selected, dtype=np.int64)
    if not len(selected):
        raise DataError("no samples selected: cannot derive negative points")
    scores = point_sums(shap, true_labels, selected)
    return NegativePointSet(
        np.flatnonzero(scores < 0), policy, len(scores), dict(source or {}), scores
    )


def prune(dataset, points):
    """Remove the negative timesteps (I and Q together) from every frame."""
    if points.frame_length != dataset.frame_length:
        raise ContractError(
            f"points computed for length {points.frame_length}, "
            f"dataset frames have length {dataset.frame_length}"
        )
    if not points.m:
        return dataset
    return dataset.replace(
        samples=np.delete(dataset.samples, points.indices, axis=1),
        pruned={"indices": points.indices.tolist(), "policy": points.policy.value},
    )


def fine_tune(params, dataset, cfg):
    """Keep conv/LSTM/batchnorm, re-initialize fc1 (new width) and fc2, then train."""
    start = resize_head(params, cfg.fc1_units, cfg.seed)
    _logger.info(
        "Fine-tuning on %s frames of length %s (fc1 %s -> %s)",
        len(dataset),
        dataset.frame_length,
        params.config.fc1_units,
        cfg.fc1_units,
    )
    return train(start, dataset, cfg.train_config())


def direct_fine_tune(params, dataset, cfg):
    """Fine-tuning without pruning."""
    return fine_tune(params, dataset, cfg)


@dataclass
class DefenseReport:
    epsilon: float
    policy: str
    m: int
    indices: list
    selected_count: int
    frame_length: int
    pruned_length: int
    accuracies: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    per_snr: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    @property
    def elements_before(self):
        return 2 * self.frame_length

    @property
    def elements_after(self):
        return 2 * self.pruned_length

    def to_dict(self):
        data = asdict(self)
        data["elements_per_frame"] = {
            "before": self.elements_before,
            "after": self.elements_after,
        }
        return data


@dataclass
class DefenseOutcome:
    params: object
    points: NegativePointSet
    report: DefenseReport
    pruned_train: object
    pruned_adv: object


def defend(
    params,
    tiny_train,
    tiny_adv,
    shap,
    adv_data,
    epsilon,
    cfg,
    policy=None,
    threshold=POLICY_THRESHOLD,
    clean_adv_data=None,
):
    """Stages 3 to 6 given the attacked splits and the tiny_adv attributions.

    ``adv_data`` is the attacked evaluation split; ``clean_adv_data`` (its
    unattacked source) adds clean accuracies to the report.
    """
    if shap.shape[:2] != tiny_adv.samples.shape[:2]:
        raise DataError(
            f"attributions {shap.shape} do not belong to tiny_adv {tiny_adv.samples.shape}"
        )
    policy = Policy(policy) if policy else policy_for_epsilon(epsilon, threshold)
    targets = tiny_adv.targets
    predictions, _ = predict_batch(params, tiny_adv)
    selected = select_samples(shap, predictions, targets, policy)
    source = {"epsilon": epsilon, "shap": shap.provenance}
    points = negative_points(shap, selected, targets, policy, source)
    _logger.info(
        "epsilon %s: %s negative points from %s %s frames",
        epsilon,
        points.m,
        len(selected),
        policy.value,
    )
    if not points.m:
        _logger.warning(
            "No negative points at epsilon %s: fine-tuning on unpruned data", epsilon
        )
    remaining = points.frame_length - points.m
    if remaining < params.config.conv_width:
        raise DataError(
            f"epsilon {epsilon}: pruning {points.m} of {points.frame_length} points leaves "
            f"frames shorter than the kernel width {params.config.conv_width}"
        )
    pruned_train = prune(tiny_train, points)
    pruned_adv = prune(adv_data, points)
    new_params, history = fine_tune(params, pruned_train, cfg)
    new_params.provenance = {
        "base_model_checksum": params.checksum(),
        "epsilon": epsilon,
        "policy": policy.value,
        "pruned_indices": points.indices.tolist(),
        "generator_hash": tiny_train.metadata.get("generator_hash"),
        "fine_tune": cfg.to_dict(),
    }
    results = {
        "tiny_adv": evaluate(params, tiny_adv),
        "adv_data": evaluate(params, adv_data),
        "defended": evaluate(new_params, pruned_adv),
    }
    if clean_adv_data is not None:
        results["clean"] = evaluate(params, clean_adv_data)
        results["defended_clean"] = evaluate(new_params, prune(clean_adv_data, points))
    report = DefenseReport(
        epsilon=float(epsilon),
        policy=policy.value,
        m=points.m,
        indices=points.indices.tolist(),
        selected_count=int(len(selected)),
        frame_length=tiny_train.frame_length,
        pruned_length=pruned_train.frame_length,
        accuracies={name: r.accuracy for name, r in results.items()},
        confusion={name: r.confusion.tolist() for name, r in results.items()},
        per_snr={
            name: {str(snr): acc for snr, acc in r.per_snr.items()}
            for name, r in results.items()
        },
        history=history.to_dict(),
    )
    _logger.info(
        "epsilon %s: adversarial accuracy %.4f, defended %.4f",
        epsilon,
        report.accuracies["adv_data"],
        report.accuracies["defended"],
    )
    return DefenseOutcome(new_params, points, report, pruned_train, pruned_adv)


def shap_ft_pipeline(
    params,
    splits,
    epsilon,
    explainer_settings,
    cfg,
    policy=None,
    threshold=POLICY_THRESHOLD,
    workers=1,
):
    """The whole defense from the clean ``tiny_train``/``tiny_test``/``adv_data``.

    ``explainer_settings`` holds the ``ExplainerConfig`` fields except the
    background, which is drawn from tiny_train.
    """
    for split in (Split.TINY_TRAIN, Split.TINY_TEST, Split.ADV_DATA):
        if split not in splits:
            raise DataError(f"the {split.value} split is required")
    tiny_train = splits[Split.TINY_TRAIN]
    explainer_cfg = ExplainerConfig(tiny_train.samples, **explainer_settings)
    attack_cfg = AttackConfig(epsilon)
    tiny_adv = attack_dataset(params, splits[Split.TINY_TEST], attack_cfg, workers=workers)
    shap = explain_dataset(params, tiny_adv, explainer_cfg, workers=workers)
    adv_data = attack_dataset(params, splits[Split.ADV_DATA], attack_cfg, workers=workers)
    return defend(
        params,
        tiny_train,
        tiny_adv,
        shap,
        adv_data,
        epsilon,
        cfg,
        policy=policy,
        threshold=threshold,
        clean_adv_data=splits[Split.ADV_DATA],
    )
