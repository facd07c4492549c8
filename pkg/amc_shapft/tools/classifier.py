# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""CNN-LSTM modulation classifier.

conv1d -> relu -> lstm -> sum over time -> batchnorm -> fc1 -> relu -> fc2 -> softmax

Summing the LSTM states over time keeps the network independent of the frame
length, so a model can classify frames with pruned time steps.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError, ContractError, DataError, NumericalError
from .formats import crc32, encode_model, load_model, save_model
from .signals import Dataset, rng_stream

_logger = logging.getLogger(__name__)

TRAINABLE = (
    "conv.kernels",
    "conv.bias",
    "lstm.w_ih",
    "lstm.w_hh",
    "lstm.bias",
    "bn.gamma",
    "bn.beta",
    "fc1.weights",
    "fc1.bias",
    "fc2.weights",
    "fc2.bias",
)
RUNNING_STATS = ("bn.running_mean", "bn.running_var")
HEAD = ("fc1.weights", "fc1.bias", "fc2.weights", "fc2.bias")
PREDICT_BATCH = 256


@dataclass
class ModelConfig:
    conv_kernels: int = 128
    conv_width: int = 8
    lstm_units: int = 128
    fc1_units: int = 256
    num_classes: int = 11

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ConfigurationError(f"model.{name} must be >= 1, got {value}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def shapes(self, in_channels=2):
        k, h = self.conv_kernels, self.lstm_units
        return {
            "conv.kernels": (k, self.conv_width, in_channels),
            "conv.bias": (k,),
            "lstm.w_ih": (k, 4 * h),
            "lstm.w_hh": (h, 4 * h),
            "lstm.bias": (4 * h,),
            "bn.gamma": (h,),
            "bn.beta": (h,),
            "bn.running_mean": (h,),
            "bn.running_var": (h,),
            "fc1.weights": (h, self.fc1_units),
            "fc1.bias": (self.fc1_units,),
            "fc2.weights": (self.fc1_units, self.num_classes),
            "fc2.bias": (self.num_classes,),
        }


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal(rng, rows, cols):
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    return q.T if rows < cols else q


def _initial_value(name, shape, rng):
    if name == "conv.kernels":
        k, w, c = shape
        return _glorot(rng, shape, w * c, w * k)
    if name in ("lstm.w_ih", "fc1.weights", "fc2.weights"):
        return _glorot(rng, shape, *shape)
    if name == "lstm.w_hh":
        return _orthogonal(rng, *shape)
    if name == "lstm.bias":
        bias = np.zeros(shape)
        units = shape[0] // 4
        bias[units : 2 * units] = 1.0
        return bias
    if name in ("bn.gamma", "bn.running_var"):
        return np.ones(shape)
    return np.zeros(shape)


def initialize_tensors(config, seed, names=None):
    """Fresh values for ``names`` (default: all) in checkpoint order."""
    rng = rng_stream(int(seed))
    shapes = config.shapes()
    return {
        name: _initial_value(name, shape, rng).astype(np.float32)
        for name, shape in shapes.items()
        if names is None or name in names
    }


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict
    provenance: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, config, seed=0):
        return cls(config, initialize_tensors(config, seed))

    def validate(self):
        expected = self.config.shapes()
        if list(self.tensors) != list(expected):
            raise ContractError(f"parameter names {list(self.tensors)} do not match the config")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ContractError(
                    f"{name} has shape {self.tensors[name].shape}, expected {shape}"
                )
            if not np.all(np.isfinite(self.tensors[name])):
                raise NumericalError("non-finite parameter", layer=name)

    def copy(self):
        return ModelParams(
            ModelConfig(**self.config.to_dict()),
            {name: value.copy() for name, value in self.tensors.items()},
            dict(self.provenance),
        )

    def encode(self):
        return encode_model(self.config.to_dict(), self.tensors)

    def checksum(self):
        return crc32(self.encode())

    def save(self, path, provenance=None):
        if provenance is not None:
            self.provenance = provenance
        return save_model(self.config.to_dict(), self.tensors, path, self.provenance)

    @classmethod
    def load(cls, path):
        config, tensors, provenance = load_model(path)
        params = cls(ModelConfig.from_dict(config), tensors, provenance)
        params.validate()
        return params


def resize_head(params, fc1_units, seed):
    """Copy of ``params`` with fc1/fc2 re-initialized at a new fc1 width."""
    config = ModelConfig(**{**params.config.to_dict(), "fc1_units": int(fc1_units)})
    fresh = initialize_tensors(config, seed, names=HEAD)
    tensors = {
        name: fresh[name] if name in HEAD else params.tensors[name].copy()
        for name in config.shapes()
    }
    return ModelParams(config, tensors, dict(params.provenance))


def _as_array(frames):
    if isinstance(frames, Dataset):
        return frames.samples
    return np.asarray(frames)


def network_logits(params, x, training=False, tensors=None):
    """Pre-softmax scores ``[..., C]`` for frames ``x[..., T, 2]``.

    ``tensors`` lets a caller pass (and watch) its own parameter Tensors.
    Returns ``(logits, running_stats)``; the stats are updated in training mode.
    """
    x = ad.as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != 2:
        raise ContractError(f"frames must be [..., T, 2], got {x.shape}")
    if x.shape[-2] < params.config.conv_width:
        raise ContractError(
            f"frame length {x.shape[-2]} is shorter than the kernel width "
            f"{params.config.conv_width}"
        )
    if tensors is None:
        tensors = {name: ad.Tensor(params.tensors[name]) for name in TRAINABLE}
    with ad.name_scope("conv"):
        h = ad.relu(ad.conv1d(x, tensors["conv.kernels"], tensors["conv.bias"]))
    with ad.name_scope("lstm"):
        h = ad.lstm_forward(h, tensors["lstm.w_ih"], tensors["lstm.w_hh"], tensors["lstm.bias"])
    with ad.name_scope("sum"):
        h = ad.sum_over_time(h)
    with ad.name_scope("batchnorm"):
        h, stats = ad.batchnorm(
            h,
            tensors["bn.gamma"],
            tensors["bn.beta"],
            params.tensors["bn.running_mean"],
            params.tensors["bn.running_var"],
            training=training,
        )
    with ad.name_scope("fc1"):
        h = ad.relu(ad.dense(h, tensors["fc1.weights"], tensors["fc1.bias"]))
    with ad.name_scope("fc2"):
        logits = ad.dense(h, tensors["fc2.weights"], tensors["fc2.bias"])
    return logits, stats


def forward(params, frame):
    """Class probabilities for one frame ``[T, 2]`` (or a batch ``[B, T, 2]``)."""
    logits, _ = network_logits(params, frame)
    return ad.softmax(logits).data


def predict_batch(params, frames, batch_size=PREDICT_BATCH):
    """``(predicted class indices, probabilities[N, C])``."""
    samples = _as_array(frames)
    if not len(samples):
        return np.zeros(0, dtype=np.int64), np.zeros((0, params.config.num_classes))
    probs = np.concatenate(
        [
            forward(params, samples[start : start + batch_size])
            for start in range(0, len(samples), batch_size)
        ]
    )
    return probs.argmax(axis=-1), probs


def confusion_matrix(true, predicted, num_classes):
    """``matrix[i, j]`` counts class ``i`` predicted as ``j``."""
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (np.asarray(true), np.asarray(predicted)), 1)
    return matrix


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray
    per_snr: dict

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "per_snr": {str(k): v for k, v in self.per_snr.items()},
        }


def evaluate(params, dataset):
    if not len(dataset):
        raise DataError("cannot evaluate on an empty dataset")
    targets = dataset.targets
    predictions, _ = predict_batch(params, dataset)
    confusion = confusion_matrix(targets, predictions, params.config.num_classes)
    correct = predictions == targets
    per_snr = {snr: float(correct[idx].mean()) for snr, idx in dataset.by_snr().items()}
    return Evaluation(
        float(np.trace(confusion) / confusion.sum()), confusion, predictions, per_snr
    )


@dataclass
class EarlyStopping:
    enabled: bool = False
    patience: int = 5
    monitor: str = "val_loss"
    restore_best: bool = True

    def __post_init__(self):
        if self.monitor not in ("val_loss", "loss"):
            raise ConfigurationError(f"unsupported early stopping monitor {self.monitor!r}")
        if self.patience < 1:
            raise ConfigurationError("early stopping patience must be >= 1")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 200
    epochs: int = 200
    validation_fraction: float = 0.1
    early_stopping: EarlyStopping = field(default_factory=EarlyStopping)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.early_stopping, dict):
            self.early_stopping = EarlyStopping(**self.early_stopping)
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must be in [0, 1)")

    def to_dict(self):
        return asdict(self)


class Adam:
    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.steps = 0
        self.m = {}
        self.v = {}

    def step(self, tensors, grads):
        """Update ``tensors`` (name -> array) in the dict, from ``grads``."""
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        for name, grad in grads.items():
            grad = grad.astype(np.float64)
            m = b1 * self.m.get(name, 0.0) + (1 - b1) * grad
            v = b2 * self.v.get(name, 0.0) + (1 - b2) * grad * grad
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1**self.steps)
            v_hat = v / (1 - b2**self.steps)
            update = self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
            tensors[name] = (tensors[name] - update).astype(np.float32)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    val_loss: float = None
    val_accuracy: float = None


@dataclass
class History:
    epochs: list = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = None

    def to_dict(self):
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "stopped_early": self.stopped_early,
            "best_epoch": self.best_epoch,
        }


def loss_and_grads(params, x, targets):
    """Mean cross-entropy of a training batch, its gradients and new BN stats."""
    with ad.GradientTape() as tape:
        tensors = {name: ad.Tensor(params.tensors[name]) for name in TRAINABLE}
        tape.watch(*tensors.values())
        logits, stats = network_logits(params, ad.Tensor(x), training=True, tensors=tensors)
        probs = ad.softmax(logits)
        loss = ad.categorical_crossentropy(probs, targets)
    grads = tape.gradient(loss, list(tensors.values()))
    predictions = probs.data.argmax(axis=-1)
    return float(loss.item()), dict(zip(TRAINABLE, grads)), stats, predictions


def dataset_loss(params, samples, targets, batch_size=PREDICT_BATCH):
    """Inference-mode mean cross-entropy and accuracy."""
    total, correct = 0.0, 0
    for start in range(0, len(samples), batch_size):
        x = samples[start : start + batch_size]
        y = targets[start : start + batch_size]
        logits, _ = network_logits(params, x)
        probs = ad.softmax(logits)
        total += ad.categorical_crossentropy(probs, y, reduction="sum").item()
        correct += int(np.sum(probs.data.argmax(axis=-1) == y))
    return total / len(samples), correct / len(samples)


def split_validation(count, fraction, seed):
    """Deterministic ``(train_indices, validation_indices)``."""
    order = rng_stream(int(seed), 1).permutation(count)
    n_val = int(round(count * fraction))
    if count - n_val < 1:
        n_val = 0
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train(params, dataset, cfg, augment=None):
    """Fit ``params`` on ``dataset`` with Adam; returns ``(params, history)``.

    ``augment(params, x, targets) -> (x, targets)`` may rewrite every batch
    (adversarial training plugs in here). Serial and deterministic.
    """
    if not len(dataset):
        raise DataError("cannot train on an empty dataset")
    if dataset.num_classes != params.config.num_classes:
        raise DataError(
            f"dataset has {dataset.num_classes} classes, model expects "
            f"{params.config.num_classes}"
        )
    samples, targets = dataset.samples, dataset.targets
    train_idx, val_idx = split_validation(len(dataset), cfg.validation_fraction, cfg.seed)
    params = params.copy()
    optimizer = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon)
    rng = rng_stream(int(cfg.seed), 2)
    history = History()
    stopping = cfg.early_stopping
    best_score, best_tensors, waited = np.inf, None, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        losses, hits, seen = [], 0, 0
        for batch, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x, y = samples[idx], targets[idx]
            if augment is not None:
                x, y = augment(params, x, y)
            try:
                loss, grads, stats, predictions = loss_and_grads(params, x, y)
            except NumericalError as err:
                raise NumericalError(
                    f"training diverged at epoch {epoch + 1}, batch {batch + 1} "
                    f"(learning rate {cfg.learning_rate}; lower it or check the "
                    f"input scale): {err}",
                    op=err.op,
                    layer=err.layer,
                ) from err
            optimizer.step(params.tensors, grads)
            params.tensors["bn.running_mean"], params.tensors["bn.running_var"] = stats
            losses.append(loss * len(y))
            hits += int(np.sum(predictions == y))
            seen += len(y)
        record = EpochRecord(epoch + 1, float(np.sum(losses) / seen), hits / seen)
        if len(val_idx):
            record.val_loss, record.val_accuracy = dataset_loss(
                params, samples[val_idx], targets[val_idx]
            )
        history.epochs.append(record)
        _logger.info(
            "epoch %s/%s - loss %.4f - accuracy %.4f - val_loss %s - val_accuracy %s",
            record.epoch,
            cfg.epochs,
            record.loss,
            record.accuracy,
            "n/a" if record.val_loss is None else f"{record.val_loss:.4f}",
            "n/a" if record.val_accuracy is None else f"{record.val_accuracy:.4f}",
        )
        if not stopping.enabled:
            continue
        score = record.val_loss if stopping.monitor == "val_loss" else record.loss
        if score is None:
            score = record.loss
        if score < best_score:
            best_score, waited = score, 0
            history.best_epoch = record.epoch
            best_tensors = {k: v.copy() for k, v in params.tensors.items()}
        else:
            waited += 1
            if waited >= stopping.patience:
                history.stopped_early = True
                _logger.info(
                    "Early stopping at epoch %s (best epoch %s)",
                    record.epoch,
                    history.best_epoch,
                )
                break
    if stopping.enabled and stopping.restore_best and best_tensors is not None:
        params.tensors = best_tensors
    return params, history
