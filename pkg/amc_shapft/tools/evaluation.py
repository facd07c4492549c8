# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""Baseline comparison and consistency checks.

Four arms are compared at every epsilon, all scored on the same adv_data
(attacked through the original model):

original   the undefended classifier
at_fgsm    trained from scratch on half clean, half FGSM batches
direct_ft  fine-tuned on the unpruned tiny_train
shap_ft    fine-tuned on the pruned tiny_train, scored on pruned frames
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .attack import AttackConfig, adversarial_training
from .classifier import ModelParams, evaluate
from .defense import direct_fine_tune, prune
from .exceptions import DataError

_logger = logging.getLogger(__name__)

ARMS = ("original", "at_fgsm", "direct_ft", "shap_ft")


def eps_tag(epsilon):
    return f"eps_{float(epsilon):g}"


def row_argmax_agreement(first, second):
    """Rows (with any mass in both matrices) whose argmax column is the same."""
    first, second = np.asarray(first), np.asarray(second)
    if first.shape != second.shape:
        raise DataError(f"cannot compare matrices of shape {first.shape} and {second.shape}")
    rows = (np.abs(first).sum(axis=1) > 0) & (np.abs(second).sum(axis=1) > 0)
    agree = first.argmax(axis=1) == second.argmax(axis=1)
    return int(np.sum(agree & rows)), int(np.sum(rows))


@dataclass
class ComparisonRow:
    epsilon: float
    seed: int
    dataset_checksum: int
    m: int
    policy: str
    clean: dict = field(default_factory=dict)
    adversarial: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, acc in {**self.clean, **self.adversarial}.items():
            if not 0 <= acc <= 1:
                raise DataError(f"accuracy of {name} outside [0, 1]: {acc}")

    @property
    def shap_ft_beats_at_fgsm(self):
        return self.adversarial["shap_ft"] >= self.adversarial["at_fgsm"]


@dataclass
class ComparisonReport:
    rows: list = field(default_factory=list)

    def to_dict(self):
        return {
            "arms": list(ARMS),
            "rows": [asdict(row) for row in self.rows],
            "shap_ft_beats_at_fgsm": {
                eps_tag(row.epsilon): row.shap_ft_beats_at_fgsm for row in self.rows
            },
        }

    @classmethod
    def from_dict(cls, data):
        return cls([ComparisonRow(**row) for row in data["rows"]])


def compare_arms(
    original,
    tiny_train,
    clean_adv,
    adv_data,
    shap_ft,
    points,
    epsilon,
    train_cfg,
    fine_tune_cfg,
    dataset_checksum,
    at_fgsm=None,
    direct_ft=None,
):
    """One comparison row; trains the AT-FGSM and direct fine-tune arms unless given.

    Returns ``(row, at_fgsm_params, direct_ft_params)``.
    """
    if at_fgsm is None:
        fresh = ModelParams.initialize(original.config, train_cfg.seed)
        at_fgsm, _ = adversarial_training(fresh, tiny_train, AttackConfig(epsilon), train_cfg)
    if direct_ft is None:
        direct_ft, _ = direct_fine_tune(original, tiny_train, fine_tune_cfg)
    pruned_clean = prune(clean_adv, points)
    pruned_adv = prune(adv_data, points)
    clean = {
        "original": evaluate(original, clean_adv).accuracy,
        "at_fgsm": evaluate(at_fgsm, clean_adv).accuracy,
        "direct_ft": evaluate(direct_ft, clean_adv).accuracy,
        "shap_ft": evaluate(shap_ft, pruned_clean).accuracy,
    }
    adversarial = {
        "original": evaluate(original, adv_data).accuracy,
        "at_fgsm": evaluate(at_fgsm, adv_data).accuracy,
        "direct_ft": evaluate(direct_ft, adv_data).accuracy,
        "shap_ft": evaluate(shap_ft, pruned_adv).accuracy,
    }
    row = ComparisonRow(
        epsilon=float(epsilon),
        seed=int(train_cfg.seed),
        dataset_checksum=int(dataset_checksum),
        m=points.m,
        policy=points.policy.value,
        clean=clean,
        adversarial=adversarial,
    )
    _logger.info(
        "epsilon %s: %s",
        epsilon,
        ", ".join(f"{arm} {adversarial[arm]:.4f}" for arm in ARMS),
    )
    if not row.shap_ft_beats_at_fgsm:
        _logger.warning("epsilon %s: AT-FGSM scored above SHAP-FT on adv_data", epsilon)
    return row, at_fgsm, direct_ft


def median_report(reports):
    """Per-epsilon median of every arm over several seeds' reports."""
    by_eps = {}
    for report in reports:
        for row in report.rows:
            by_eps.setdefault(row.epsilon, []).append(row)
    summary = {}
    for epsilon, rows in sorted(by_eps.items()):
        summary[eps_tag(epsilon)] = {
            kind: {
                arm: float(np.median([getattr(r, kind)[arm] for r in rows])) for arm in ARMS
            }
            for kind in ("clean", "adversarial")
        }
        summary[eps_tag(epsilon)]["seeds"] = [r.seed for r in rows]
    return summary
