# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)
"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive records one entry on the active tapes of the calling thread.
Layers (conv1d, lstm_forward, dense, batchnorm) are compositions of
primitives, except conv1d, softmax and the cross-entropy which carry their
own vector-Jacobian products.

    with GradientTape() as tape:
        tape.watch(x)
        loss = categorical_crossentropy(softmax(dense(x, w, b)), labels)
    (grad_x,) = tape.gradient(loss, [x])
"""

import contextlib
import logging
import os
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import ContractError, NumericalError

_logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}

SOFTMAX_FLOOR = 1e-12
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5

_default_dtype = np.dtype(
    PRECISIONS[os.environ.get("AMC_SHAPFT_PRECISION", "float32")]
)
_local = threading.local()


def get_precision():
    return _default_dtype


def set_precision(name):
    global _default_dtype
    if name not in PRECISIONS:
        raise ContractError(f"unknown precision {name!r}, use one of {sorted(PRECISIONS)}")
    _default_dtype = np.dtype(PRECISIONS[name])


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the default dtype (``float64`` for oracle checks)."""
    previous = _default_dtype.name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """Row-major n-dimensional array of reals."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class _Record:
    __slots__ = ("name", "scope", "inputs", "outputs", "vjp", "multi")

    def __init__(self, name, scope, inputs, outputs, vjp, multi):
        self.name = name
        self.scope = scope
        self.inputs = inputs
        self.outputs = outputs
        self.vjp = vjp
        self.multi = multi


def _active_tapes():
    return getattr(_local, "tapes", ())


class GradientTape:
    """Append-only record of the primitives applied to watched tensors.

    A tape belongs to the thread that entered it; run one tape per concurrent
    forward pass.
    """

    def __init__(self):
        self._records = []
        self._watched = []
        self._tracked = set()
        self._frozen = False

    def __enter__(self):
        _local.tapes = _active_tapes() + (self,)
        return self

    def __exit__(self, *exc):
        _local.tapes = tuple(t for t in _active_tapes() if t is not self)
        return False

    @property
    def frozen(self):
        return self._frozen

    def watch(self, *tensors):
        for tensor in tensors:
            if not isinstance(tensor, Tensor):
                raise ContractError("only Tensor instances can be watched")
            if id(tensor) not in self._tracked:
                self._watched.append(tensor)
                self._tracked.add(id(tensor))

    def _record(self, name, inputs, outputs, vjp, multi):
        if not any(id(t) in self._tracked for t in inputs):
            return
        if self._frozen:
            raise ContractError("the tape is frozen: no recording after backward")
        self._records.append(
            _Record(name, _scope(), inputs, outputs, vjp, multi)
        )
        for out in outputs:
            self._tracked.add(id(out))

    def gradient(self, target, sources=None):
        """Replay the tape backward from the scalar ``target``.

        Returns one gradient per source (default: every watched tensor, in
        watch order). Sources the target does not depend on get zeros.
        """
        if target.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {target.shape}"
            )
        self._frozen = True
        grads = {id(target): np.ones_like(target.data)}
        for rec in reversed(self._records):
            out_grads = [grads.get(id(o)) for o in rec.outputs]
            if all(g is None for g in out_grads):
                continue
            if rec.multi:
                out_grads = [
                    np.zeros_like(o.data) if g is None else g
                    for o, g in zip(rec.outputs, out_grads)
                ]
                in_grads = rec.vjp(out_grads)
            else:
                in_grads = rec.vjp(out_grads[0])
            for tensor, g in zip(rec.inputs, in_grads):
                if g is None or id(tensor) not in self._tracked:
                    continue
                _check_finite(g, rec.name, rec.scope, what="gradient")
                key = id(tensor)
                grads[key] = grads[key] + g if key in grads else g
        sources = self._watched if sources is None else sources
        return [
            grads[id(s)] if id(s) in grads else np.zeros_like(s.data) for s in sources
        ]


def backward(tape, loss):
    """Gradients of a scalar ``loss`` for every watched tensor of ``tape``."""
    return tape.gradient(loss)


def _check_finite(array, name, scope=None, what="value"):
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"non-finite {what}", op=name, layer=scope)


@contextlib.contextmanager
def name_scope(name):
    """Tag the ops run inside the block with a layer name (thread-local)."""
    _local.scopes = getattr(_local, "scopes", ()) + (name,)
    try:
        yield
    finally:
        _local.scopes = _local.scopes[:-1]


def _scope():
    return "/".join(getattr(_local, "scopes", ())) or None


def _emit(name, inputs, out_data, vjp):
    _check_finite(out_data, name, _scope())
    out = Tensor(out_data, dtype=out_data.dtype)
    for tape in _active_tapes():
        tape._record(name, inputs, (out,), vjp, False)
    return out


def _emit_many(name, inputs, out_arrays, vjp):
    outs = tuple(Tensor(a, dtype=a.dtype) for a in out_arrays)
    for tape in _active_tapes():
        tape._record(name, inputs, outs, vjp, True)
    return list(outs)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    out = a.data**exponent
    return _emit(
        "power", (a,), out, lambda g: (g * exponent * a.data ** (exponent - 1),)
    )


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1 - out * out),))


# shape and reductions


def reshape(a, shape):
    a = as_tensor(a)
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return _emit(
        "sum", (a,), out, lambda g: (_expand(g, a.shape, axis, keepdims),)
    )


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size // max(out.size, 1)
    return _emit(
        "mean", (a,), out, lambda g: (_expand(g / count, a.shape, axis, keepdims),)
    )


def index_axis(a, index, axis):
    """Select one position along ``axis`` (the axis is dropped)."""
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.moveaxis(full, axis, 0)[index] = g
        return (full,)

    return _emit("index", (a,), np.take(a.data, index, axis=axis), vjp)


def take_column(a, index):
    """``a[..., index]`` as a differentiable op."""
    return index_axis(a, index, axis=-1)


def unstack(a, axis):
    """Split ``a`` along ``axis`` into a list of tensors (one tape record)."""
    a = as_tensor(a)
    parts = [np.take(a.data, i, axis=axis) for i in range(a.shape[axis])]
    return _emit_many("unstack", (a,), parts, lambda gs: (np.stack(gs, axis=axis),))


def split(a, sections, axis=-1):
    """Split ``a`` into ``sections`` equal parts along ``axis``."""
    a = as_tensor(a)
    if a.shape[axis] % sections:
        raise ContractError(f"axis of size {a.shape[axis]} is not divisible by {sections}")
    parts = np.split(a.data, sections, axis=axis)
    return _emit_many(
        "split", (a,), parts, lambda gs: (np.concatenate(gs, axis=axis),)
    )


def stack(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    return _emit(
        "stack",
        tensors,
        out,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


def matmul(a, b):
    """``a[..., K] @ b[K, N]``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        grad_a = g @ b.data.T
        grad_b = a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1])
        return grad_a, grad_b

    return _emit("matmul", (a, b), a.data @ b.data, vjp)


# layers


def conv1d(x, kernels, bias):
    """Same-length 1-D convolution.

    ``x`` is ``[..., T, Cin]``, ``kernels`` ``[K, W, Cin]`` and ``bias`` ``[K]``;
    the output is ``[..., T, K]`` with
    ``out[t, k] = bias[k] + sum_{w,c} kernels[k, w, c] * x[t + w - W // 2, c]``
    and zero padding outside ``[0, T)``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim < 2 or kernels.ndim != 3 or bias.ndim != 1:
        raise ContractError("conv1d expects x[..., T, Cin], kernels[K, W, Cin], bias[K]")
    n_k, width, c_in = kernels.shape
    steps = x.shape[-2]
    if x.shape[-1] != c_in or bias.shape[0] != n_k:
        raise ContractError(
            f"conv1d shape mismatch: x {x.shape}, kernels {kernels.shape}, bias {bias.shape}"
        )
    if width > steps:
        raise ContractError(f"kernel width {width} exceeds sequence length {steps}")
    left = width // 2
    right = width - 1 - left
    batch_shape = x.shape[:-2]
    x3 = x.data.reshape(-1, steps, c_in)
    padded = np.pad(x3, ((0, 0), (left, right), (0, 0)))
    windows = sliding_window_view(padded, width, axis=1)  # [B, T, Cin, W]
    out = np.einsum("btcw,kwc->btk", windows, kernels.data, optimize=True)
    out = (out + bias.data).reshape(batch_shape + (steps, n_k))

    def vjp(g):
        g3 = g.reshape(-1, steps, n_k)
        grad_k = np.einsum("btcw,btk->kwc", windows, g3, optimize=True)
        grad_win = np.einsum("btk,kwc->btcw", g3, kernels.data, optimize=True)
        grad_pad = np.zeros_like(padded)
        for w in range(width):
            grad_pad[:, w : w + steps, :] += grad_win[..., w]
        grad_x = grad_pad[:, left : left + steps, :].reshape(x.shape)
        return grad_x, grad_k, g3.sum(axis=(0, 1))

    return _emit("conv1d", (x, kernels, bias), out.astype(x.dtype, copy=False), vjp)


def dense(x, weights, bias):
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2 or bias.shape != (weights.shape[1],):
        raise ContractError(
            f"dense shape mismatch: weights {weights.shape}, bias {bias.shape}"
        )
    return add(matmul(x, weights), bias)


def lstm_forward(x, w_ih, w_hh, bias):
    """Per-timestep hidden states of a single LSTM layer.

    ``x`` is ``[..., T, F]``; ``w_ih`` ``[F, 4H]``, ``w_hh`` ``[H, 4H]`` and
    ``bias`` ``[4H]`` hold the gates in input, forget, candidate, output order.
    Returns ``[..., T, H]``; the initial hidden and cell states are zero.
    """
    x, w_ih, w_hh, bias = (as_tensor(t) for t in (x, w_ih, w_hh, bias))
    units = w_hh.shape[0]
    if (
        x.ndim < 2
        or w_ih.shape != (x.shape[-1], 4 * units)
        or w_hh.shape != (units, 4 * units)
        or bias.shape != (4 * units,)
    ):
        raise ContractError(
            f"lstm shape mismatch: x {x.shape}, w_ih {w_ih.shape}, "
            f"w_hh {w_hh.shape}, bias {bias.shape}"
        )
    projected = unstack(add(matmul(x, w_ih), bias), axis=-2)
    state_shape = x.shape[:-2] + (units,)
    h = Tensor(np.zeros(state_shape, dtype=x.dtype))
    c = Tensor(np.zeros(state_shape, dtype=x.dtype))
    hidden = []
    for step in projected:
        gates = split(add(step, matmul(h, w_hh)), 4)
        i, f, o = sigmoid(gates[0]), sigmoid(gates[1]), sigmoid(gates[3])
        candidate = tanh(gates[2])
        c = add(mul(f, c), mul(i, candidate))
        h = mul(o, tanh(c))
        hidden.append(h)
    return stack(hidden, axis=-2)


def sum_over_time(x):
    """``[..., T, H] -> [..., H]``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ContractError("sum_over_time expects at least [T, H]")
    return reduce_sum(x, axis=-2)


def batchnorm(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training,
    momentum=BN_MOMENTUM,
    eps=BN_EPSILON,
):
    """Per-feature normalization over the leading (batch) axes.

    ``training`` must be given explicitly. Returns ``(y, (mean, var))`` where
    the pair holds the running statistics after this call: updated from the
    batch in training mode, unchanged otherwise.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    features = x.shape[-1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise ContractError(
            f"batchnorm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    running_mean = np.asarray(running_mean)
    running_var = np.asarray(running_var)
    if not training:
        scale = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        centered = sub(x, running_mean.astype(x.dtype))
        return add(mul(mul(centered, scale), gamma), beta), (running_mean, running_var)
    axes = tuple(range(x.ndim - 1))
    if not axes:
        raise ContractError("training-mode batchnorm needs a batch axis")
    mu = reduce_mean(x, axis=axes, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=axes, keepdims=True)
    y = add(mul(mul(centered, power(add(var, eps), -0.5)), gamma), beta)
    new_mean = momentum * running_mean + (1 - momentum) * mu.data.reshape(features)
    new_var = momentum * running_var + (1 - momentum) * var.data.reshape(features)
    return y, (new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype))


def softmax(logits, axis=-1):
    logits = as_tensor(logits)
    if logits.ndim == 0 or logits.shape[axis] == 0:
        raise ContractError("softmax of an empty vector")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (logits,), out, vjp)


def one_hot(labels, num_classes, dtype=None):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(
            f"label index out of range [0, {num_classes}): {labels.min()}..{labels.max()}"
        )
    return np.eye(num_classes, dtype=dtype or _default_dtype)[labels]


def categorical_crossentropy(probs, labels, reduction="mean"):
    """Cross-entropy of probability rows against integer or one-hot labels.

    Probabilities are clamped at ``SOFTMAX_FLOOR`` before the log. With a batch
    axis the per-sample losses are averaged (``reduction="mean"``) or summed.
    """
    probs = as_tensor(probs)
    if probs.ndim == 0 or probs.shape[-1] == 0:
        raise ContractError("crossentropy of an empty vector")
    classes = probs.shape[-1]
    labels = np.asarray(labels)
    if np.issubdtype(labels.dtype, np.integer):
        target = one_hot(labels, classes, dtype=probs.dtype)
    else:
        target = labels.astype(probs.dtype)
    if target.shape != probs.shape:
        raise ContractError(f"labels {target.shape} do not match probabilities {probs.shape}")
    clamped = np.clip(probs.data, SOFTMAX_FLOOR, None)
    per_sample = -(target * np.log(clamped)).sum(axis=-1)
    count = per_sample.size
    if reduction == "mean":
        scale = 1.0 / count
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ContractError(f"unknown reduction {reduction!r}")
    out = np.asarray(per_sample.sum() * scale, dtype=probs.dtype)

    def vjp(g):
        inside = probs.data >= SOFTMAX_FLOOR
        return (g * scale * (-target / clamped) * inside,)

    return _emit("crossentropy", (probs,), out, vjp)


def dump_csv(tensor, path):
    """Write the flat row-major values, one per line."""
    data = as_tensor(tensor).data.reshape(-1)
    np.savetxt(path, data, delimiter=",", fmt="%.9g")
    _logger.debug("dumped %s values to %s", data.size, path)
