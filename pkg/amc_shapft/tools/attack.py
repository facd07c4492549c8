# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""Fast gradient sign attack and the adversarial-training baseline.

The perturbation is ``epsilon * sign(grad_x loss)`` with ``sign(0) == 0``, the
loss is the cross-entropy against the true label and the result is not
clipped: IQ samples have no natural range.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .classifier import PREDICT_BATCH, evaluate, network_logits, train
from .exceptions import ConfigurationError, ContractError
from .signals import IQFrame, Split

_logger = logging.getLogger(__name__)

ATTACKED_SPLIT = {Split.TINY_TEST: Split.TINY_ADV}


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    sign_zero_convention: float = 0.0
    targeted: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.sign_zero_convention != 0 or self.targeted:
            raise ConfigurationError("only the untargeted attack with sign(0) = 0 exists")

    def to_dict(self):
        return asdict(self)


def input_gradients(params, frames, targets):
    """Gradient of each frame's own cross-entropy w.r.t. that frame.

    Frames are scored in inference mode, so summing the per-frame losses keeps
    every frame's gradient independent of the rest of the batch.
    """
    frames = np.asarray(frames)
    targets = np.asarray(targets, dtype=np.int64)
    if frames.shape[:-2] != targets.shape:
        raise ContractError(
            f"{targets.shape} labels for frames of shape {frames.shape}"
        )
    with ad.GradientTape() as tape:
        x = ad.Tensor(frames)
        tape.watch(x)
        logits, _ = network_logits(params, x)
        loss = ad.categorical_crossentropy(ad.softmax(logits), targets, reduction="sum")
    (grad,) = tape.gradient(loss, [x])
    return grad


def input_gradient(params, frame, label):
    """``[T, 2]`` gradient for one frame and its class index."""
    return input_gradients(params, np.asarray(frame)[None], [label])[0]


def perturb(frames, grads, epsilon):
    frames = np.asarray(frames, dtype=np.float32)
    return frames + np.float32(epsilon) * np.sign(grads).astype(np.float32)


def fgsm_batch(params, frames, targets, cfg):
    if cfg.epsilon == 0:
        return np.array(frames, dtype=np.float32)
    return perturb(frames, input_gradients(params, frames, targets), cfg.epsilon)


def fgsm(params, frame, label, cfg):
    """Adversarial copy of ``frame`` (an ``IQFrame`` or a ``[T, 2]`` array)."""
    if isinstance(frame, IQFrame):
        samples = fgsm_batch(params, frame.samples[None], [label], cfg)[0]
        return IQFrame(samples, frame.label, frame.snr_db)
    return fgsm_batch(params, np.asarray(frame)[None], [label], cfg)[0]


def attack_dataset(params, dataset, cfg, batch_size=PREDICT_BATCH, workers=1):
    """FGSM every frame of ``dataset`` with its true label.

    Labels and SNR tags are kept; metadata records the attack and its source.
    """
    samples, targets = dataset.samples, dataset.targets
    starts = range(0, len(dataset), batch_size)

    def run(start):
        stop = start + batch_size
        return fgsm_batch(params, samples[start:stop], targets[start:stop], cfg)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        chunks = list(pool.map(run, starts))
    adversarial = np.concatenate(chunks) if chunks else samples.copy()
    source = dataset.split_tag.value if dataset.split_tag else None
    _logger.info(
        "Attacked %s frames of %s at epsilon %s", len(dataset), source, cfg.epsilon
    )
    return dataset.replace(
        samples=adversarial,
        split_tag=ATTACKED_SPLIT.get(dataset.split_tag, dataset.split_tag),
        attack={"epsilon": cfg.epsilon, "source_split": source},
    )


def fgsm_augment(cfg):
    """Training hook that appends the FGSM copy of every batch."""

    def augment(params, x, targets):
        if cfg.epsilon == 0:
            return x, targets
        adversarial = fgsm_batch(params, x, targets, cfg)
        return np.concatenate([x, adversarial]), np.concatenate([targets, targets])

    return augment


def adversarial_training(params, dataset, cfg, train_cfg):
    """AT-FGSM: train on half clean, half adversarial batches."""
    _logger.info("Adversarial training at epsilon %s", cfg.epsilon)
    return train(params, dataset, train_cfg, augment=fgsm_augment(cfg))


def robust_accuracy_curve(params, dataset, epsilons, workers=1):
    """Accuracy on ``dataset`` attacked at each epsilon (``{epsilon: accuracy}``)."""
    curve = {}
    for epsilon in epsilons:
        attacked = attack_dataset(params, dataset, AttackConfig(epsilon), workers=workers)
        curve[float(epsilon)] = evaluate(params, attacked).accuracy
        _logger.info("epsilon %s: accuracy %.4f", epsilon, curve[float(epsilon)])
    return curve
