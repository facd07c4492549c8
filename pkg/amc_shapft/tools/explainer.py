# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""Gradient attributions: integrated gradients, expected gradients and an
exact Shapley oracle.

The explained output is the pre-softmax logit of a class. A model is either
trained ``ModelParams`` or any callable mapping a ``Tensor[B, ...]`` to logits
``Tensor[B, C]`` through autodiff ops (``AffineModel`` for instance).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .classifier import ModelParams, network_logits
from .exceptions import ContractError
from .formats import load_shap, save_shap
from .signals import Dataset, rng_stream

_logger = logging.getLogger(__name__)

BACKGROUND_CAP = 5000
MAX_PLAYERS = 12
GRADIENT_BATCH = 256


class AffineModel:
    """``f(x) = sum(x * weights[..., c]) + bias[c]`` over the feature axes."""

    def __init__(self, weights, bias=None):
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.ndim < 2:
            raise ContractError("weights must be [..., C]")
        self.feature_shape = self.weights.shape[:-1]
        self.num_classes = self.weights.shape[-1]
        self.bias = (
            np.zeros(self.num_classes) if bias is None else np.asarray(bias, dtype=np.float64)
        )

    def __call__(self, x):
        x = ad.as_tensor(x)
        rank = len(self.feature_shape)
        if x.shape[x.ndim - rank :] != self.feature_shape:
            raise ContractError(f"input {x.shape} does not end with {self.feature_shape}")
        features = int(np.prod(self.feature_shape))
        flat = ad.reshape(x, x.shape[: x.ndim - rank] + (features,))
        weights = ad.Tensor(self.weights.reshape(features, self.num_classes))
        return ad.dense(flat, weights, ad.Tensor(self.bias))


def model_logits(model, x):
    if isinstance(model, ModelParams):
        logits, _ = network_logits(model, x)
        return logits
    return ad.as_tensor(model(x))


def class_gradients(model, points, class_indices, batch_size=GRADIENT_BATCH):
    """``d logit[class_indices[i]] / d points[i]`` for every point (inference mode)."""
    points = np.asarray(points)
    class_indices = np.asarray(class_indices, dtype=np.int64)
    grads = []
    for start in range(0, len(points), batch_size):
        with ad.GradientTape() as tape:
            x = ad.Tensor(points[start : start + batch_size])
            tape.watch(x)
            logits = model_logits(model, x)
            mask = ad.one_hot(
                class_indices[start : start + batch_size], logits.shape[-1], logits.dtype
            )
            target = ad.reduce_sum(ad.mul(logits, mask))
        grads.append(tape.gradient(target, [x])[0].astype(np.float64))
    return np.concatenate(grads) if grads else np.zeros(points.shape)


def _check_pair(frame, baseline):
    frame, baseline = np.asarray(frame, np.float64), np.asarray(baseline, np.float64)
    if frame.shape != baseline.shape:
        raise ContractError(f"frame {frame.shape} and baseline {baseline.shape} differ")
    return frame, baseline


def integrated_gradients(model, frame, baseline, class_index, steps=64):
    """Midpoint-rule path integral of the class gradient from ``baseline`` to ``frame``."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    frame, baseline = _check_pair(frame, baseline)
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    shape = (steps,) + (1,) * frame.ndim
    points = baseline + alphas.reshape(shape) * (frame - baseline)
    grads = class_gradients(model, points, np.full(steps, class_index))
    return (frame - baseline) * grads.mean(axis=0)


def background_frames(dataset, cap=BACKGROUND_CAP, seed=0):
    """At most ``cap`` frames of ``dataset``, a seeded subsample when larger."""
    samples = dataset.samples if isinstance(dataset, Dataset) else np.asarray(dataset)
    if len(samples) <= cap:
        return samples
    chosen = np.sort(rng_stream(int(seed), 3).choice(len(samples), cap, replace=False))
    return samples[chosen]


@dataclass
class ExplainerConfig:
    background: np.ndarray
    num_samples: int = 256
    seed: int = 0
    background_cap: int = BACKGROUND_CAP
    batch_size: int = GRADIENT_BATCH

    def __post_init__(self):
        self.background = background_frames(self.background, self.background_cap, self.seed)
        if not len(self.background):
            raise ContractError("the explainer background is empty")
        if self.num_samples < 1:
            raise ContractError("num_samples must be >= 1")

    def to_dict(self):
        return {
            "num_samples": self.num_samples,
            "seed": self.seed,
            "background_cap": self.background_cap,
            "background_size": len(self.background),
        }


def expected_gradients(model, frame, cfg, class_index, frame_index=0):
    """Monte-Carlo expected gradients for one (frame, class) pair.

    Draws ``(baseline, alpha)`` pairs from the stream keyed by
    ``(seed, frame_index, class_index)``.
    """
    frame = np.asarray(frame, dtype=np.float64)
    background = np.asarray(cfg.background, dtype=np.float64)
    if background.shape[1:] != frame.shape:
        raise ContractError(
            f"background frames {background.shape[1:]} do not match frame {frame.shape}"
        )
    rng = rng_stream(int(cfg.seed), int(frame_index), int(class_index))
    chosen = rng.integers(0, len(background), size=cfg.num_samples)
    alphas = rng.random(cfg.num_samples).reshape((-1,) + (1,) * frame.ndim)
    deltas = frame - background[chosen]
    points = background[chosen] + alphas * deltas
    grads = class_gradients(
        model, points, np.full(cfg.num_samples, class_index), cfg.batch_size
    )
    return (deltas * grads).mean(axis=0)


@dataclass
class ShapTensor:
    """Attributions ``values[N, T, 2, C]`` and the explainer provenance."""

    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 4:
            raise ContractError(f"attributions must be [N, T, 2, C], got {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def model_checksum(self):
        return int(self.provenance.get("model_checksum", 0))

    def save(self, path):
        config = {k: v for k, v in self.provenance.items() if k != "model_checksum"}
        return save_shap(self.values, self.model_checksum, config, path)

    @classmethod
    def load(cls, path):
        values, model_checksum, config = load_shap(path)
        return cls(values, dict(config, model_checksum=model_checksum))


def explain_frame(model, frame, cfg, frame_index, classes):
    return np.stack(
        [expected_gradients(model, frame, cfg, c, frame_index) for c in range(classes)],
        axis=-1,
    )


def explain_dataset(params, dataset, cfg, workers=1):
    """Expected gradients of every frame for every class, in frame order."""
    samples = dataset.samples if isinstance(dataset, Dataset) else np.asarray(dataset)
    if isinstance(params, ModelParams):
        classes = params.config.num_classes
    else:
        classes = params.num_classes
    _logger.info(
        "Explaining %s frames x %s classes with %s samples each",
        len(samples),
        classes,
        cfg.num_samples,
    )

    def run(index):
        return explain_frame(params, samples[index], cfg, index, classes)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        values = list(pool.map(run, range(len(samples))))
    values = (
        np.stack(values) if values else np.zeros((0,) + samples.shape[1:] + (classes,))
    )
    provenance = dict(cfg.to_dict())
    if isinstance(params, ModelParams):
        provenance["model_checksum"] = params.checksum()
    if isinstance(dataset, Dataset):
        provenance["split"] = dataset.split_tag.value if dataset.split_tag else None
        if "attack" in dataset.metadata:
            provenance["attack"] = dataset.metadata["attack"]
    return ShapTensor(values, provenance)


class CoalitionValueFn:
    """``v(S)``: the class logit with the players outside ``S`` set to the baseline.

    Players are the flat elements of the frame unless ``groups`` (one list of
    flat element indices per player) says otherwise.
    """

    def __init__(self, model, frame, baseline, class_index, groups=None):
        self.model = model
        self.frame, self.baseline = _check_pair(frame, baseline)
        self.class_index = class_index
        if groups is None:
            groups = [[i] for i in range(self.frame.size)]
        self.groups = [np.asarray(g, dtype=np.int64) for g in groups]

    @property
    def players(self):
        return len(self.groups)

    def _inputs(self, masks):
        masks = np.asarray(masks, dtype=bool).reshape(-1, self.players)
        keep = np.zeros((len(masks), self.frame.size), dtype=bool)
        for player, group in enumerate(self.groups):
            keep[:, group] = masks[:, [player]]
        x = np.where(keep, self.frame.reshape(-1), self.baseline.reshape(-1))
        return x.reshape((len(masks),) + self.frame.shape)

    def many(self, masks):
        logits = model_logits(self.model, ad.Tensor(self._inputs(masks)))
        return logits.data[:, self.class_index].astype(np.float64)

    def __call__(self, mask):
        return float(self.many([mask])[0])


def exact_shapley(value_fn, n=None):
    """Shapley values by enumerating all ``2**n`` coalitions.

    ``value_fn`` is a ``CoalitionValueFn`` or any callable taking a boolean
    membership mask of length ``n``.
    """
    if n is None:
        n = value_fn.players
    if n < 1 or n > MAX_PLAYERS:
        raise ContractError(f"exact enumeration supports 1..{MAX_PLAYERS} players, got {n}")
    if isinstance(value_fn, CoalitionValueFn) and value_fn.players != n:
        raise ContractError(f"value function has {value_fn.players} players, not {n}")
    codes = np.arange(2**n)
    masks = (codes[:, None] >> np.arange(n)) & 1 == 1
    if isinstance(value_fn, CoalitionValueFn):
        values = value_fn.many(masks)
    else:
        values = np.array([float(value_fn(mask)) for mask in masks])
    sizes = masks.sum(axis=1)
    weights = np.array(
        [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    )
    phi = np.zeros(n)
    for player in range(n):
        without = ~masks[:, player]
        gains = values[codes[without] | (1 << player)] - values[without]
        phi[player] = np.sum(weights[sizes[without]] * gains)
    return phi


def heatmap(shap, predictions, true_labels):
    """``[C, C]``; entry ``(i, j)`` sums the class-``j`` attributions of frames of
    class ``i`` predicted as ``j``."""
    values = shap.values if isinstance(shap, ShapTensor) else np.asarray(shap)
    predictions, true_labels = np.asarray(predictions), np.asarray(true_labels)
    if not len(values) == len(predictions) == len(true_labels):
        raise ContractError("attributions, predictions and labels must have the same length")
    classes = values.shape[-1]
    per_frame = values.sum(axis=(1, 2), dtype=np.float64)
    matrix = np.zeros((classes, classes))
    np.add.at(
        matrix,
        (true_labels, predictions),
        per_frame[np.arange(len(values)), predictions],
    )
    return matrix


def point_sums(shap, true_labels, selected=None):
    """Per-timestep sum of the true-class attributions over ``selected`` frames."""
    values = shap.values if isinstance(shap, ShapTensor) else np.asarray(shap)
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if len(true_labels) != len(values):
        raise ContractError("one label per explained frame is required")
    selected = np.arange(len(values)) if selected is None else np.asarray(selected, np.int64)
    picked = values[selected, :, :, true_labels[selected]]
    return picked.sum(axis=(0, 2), dtype=np.float64)
