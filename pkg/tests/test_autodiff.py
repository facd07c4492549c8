# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)

from unittest import TestCase

import numpy as np

from amc_shapft.tools import autodiff as ad
from amc_shapft.tools.exceptions import ContractError, NumericalError


def numeric_grad(func, array, step=1e-6):
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        up = func()
        flat[i] = saved - step
        down = func()
        flat[i] = saved
        out[i] = (up - down) / (2 * step)
    return grad


class GradCheck(TestCase):
    def setUp(self):
        super().setUp()
        self._precision = ad.precision("float64")
        self._precision.__enter__()
        self.rng = np.random.default_rng(0)

    def tearDown(self):
        self._precision.__exit__(None, None, None)
        super().tearDown()

    def check(self, build, *arrays, atol=1e-6):
        """Compare tape gradients of ``build(*tensors)`` with central differences."""
        tensors = [ad.Tensor(a) for a in arrays]
        with ad.GradientTape() as tape:
            tape.watch(*tensors)
            loss = build(*tensors)
        grads = tape.gradient(loss)
        for tensor, grad in zip(tensors, grads):
            expected = numeric_grad(lambda: build(*tensors).item(), tensor.data)
            np.testing.assert_allclose(grad, expected, atol=atol, rtol=1e-5)


class TestOps(GradCheck):
    def test_elementwise(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.uniform(0.5, 2.0, size=(4,))
        self.check(lambda x, y: ((x * y + x) ** 2 - ad.log(y)).sum(), a, b)
        self.check(lambda x: (ad.tanh(x) + ad.sigmoid(x) * ad.exp(x)).mean(), a)

    def test_matmul_broadcast(self):
        a = self.rng.normal(size=(2, 3, 4))
        w = self.rng.normal(size=(4, 5))
        self.check(lambda x, y: ad.tanh(x @ y).sum(), a, w)

    def test_dense(self):
        x = self.rng.normal(size=(3, 4))
        w = self.rng.normal(size=(4, 2))
        b = self.rng.normal(size=(2,))
        self.check(lambda x, w, b: ad.tanh(ad.dense(x, w, b)).sum(), x, w, b)
        out = ad.dense(np.ones(2), np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, -1.0]))
        np.testing.assert_allclose(out.data, [4.5, 5.0])
        with self.assertRaises(ContractError):
            ad.dense(x, w, np.zeros(3))

    def test_conv1d(self):
        x = self.rng.normal(size=(2, 7, 2))
        k = self.rng.normal(size=(3, 4, 2))
        b = self.rng.normal(size=(3,))
        self.check(lambda x, k, b: ad.tanh(ad.conv1d(x, k, b)).sum(), x, k, b)

    def test_conv1d_same_length(self):
        out = ad.conv1d(np.ones((5, 2)), np.ones((1, 3, 2)), np.zeros(1))
        self.assertEqual(out.shape, (5, 1))
        # zero padding at both ends
        np.testing.assert_allclose(out.data[:, 0], [4, 6, 6, 6, 4])

    def test_lstm(self):
        x = self.rng.normal(size=(2, 4, 3))
        w_ih = self.rng.normal(scale=0.5, size=(3, 8))
        w_hh = self.rng.normal(scale=0.5, size=(2, 8))
        bias = self.rng.normal(size=(8,))
        self.check(
            lambda *t: ad.sum_over_time(ad.lstm_forward(*t)).sum(), x, w_ih, w_hh, bias
        )

    def test_batchnorm_training(self):
        x = self.rng.normal(size=(5, 3))
        gamma = self.rng.normal(size=(3,))
        beta = self.rng.normal(size=(3,))

        def build(x, g, b):
            y, _ = ad.batchnorm(x, g, b, np.zeros(3), np.ones(3), training=True)
            return (y * y * ad.Tensor(np.arange(15.0).reshape(5, 3))).sum()

        self.check(build, x, gamma, beta, atol=1e-5)

    def test_batchnorm_running_stats(self):
        x = ad.Tensor(np.array([[1.0, 2.0], [3.0, 6.0]]))
        _, (mean, var) = ad.batchnorm(
            x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=True, momentum=0.5
        )
        np.testing.assert_allclose(mean, [1.0, 2.0])
        np.testing.assert_allclose(var, [0.5 + 0.5 * 1.0, 0.5 + 0.5 * 4.0])
        y, stats = ad.batchnorm(x, np.ones(2), np.zeros(2), mean, var, training=False)
        self.assertIs(stats[0], mean)
        self.assertEqual(y.shape, (2, 2))

    def test_softmax_crossentropy(self):
        logits = self.rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 2])
        self.check(
            lambda z: ad.categorical_crossentropy(ad.softmax(z), labels, reduction="sum"),
            logits,
        )
        probs = ad.softmax(logits).data
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0)

    def test_crossentropy_one_hot_matches_indices(self):
        probs = ad.softmax(self.rng.normal(size=(3, 4)))
        labels = np.array([1, 3, 0])
        by_index = ad.categorical_crossentropy(probs, labels).item()
        by_vector = ad.categorical_crossentropy(probs, ad.one_hot(labels, 4)).item()
        self.assertAlmostEqual(by_index, by_vector)

    def test_unstack_split_stack(self):
        a = self.rng.normal(size=(2, 3, 4))

        def build(x):
            rows = ad.unstack(x, axis=1)
            halves = ad.split(rows[0], 2)
            return (ad.stack(rows[1:], axis=0) * 2.0).sum() + (halves[1] * halves[0]).sum()

        self.check(build, a)

    def test_take_column(self):
        a = self.rng.normal(size=(3, 4))
        self.check(lambda x: (ad.take_column(x, 2) ** 2).sum(), a)


def loop_conv1d(x, kernels, bias):
    steps, c_in = x.shape
    n_k, width, _ = kernels.shape
    left = width // 2
    out = np.zeros((steps, n_k))
    for t in range(steps):
        for k in range(n_k):
            total = bias[k]
            for w in range(width):
                src = t + w - left
                if 0 <= src < steps:
                    for c in range(c_in):
                        total += kernels[k, w, c] * x[src, c]
            out[t, k] = total
    return out


def loop_dense(x, weights, bias):
    out = np.zeros(weights.shape[1])
    for j in range(weights.shape[1]):
        out[j] = bias[j] + sum(x[i] * weights[i, j] for i in range(weights.shape[0]))
    return out


def loop_lstm(x, w_ih, w_hh, bias):
    units = w_hh.shape[0]
    h, c = np.zeros(units), np.zeros(units)
    hidden = []
    for step in x:
        z = step @ w_ih + h @ w_hh + bias
        i = 1 / (1 + np.exp(-z[:units]))
        f = 1 / (1 + np.exp(-z[units : 2 * units]))
        g = np.tanh(z[2 * units : 3 * units])
        o = 1 / (1 + np.exp(-z[3 * units :]))
        c = f * c + i * g
        h = o * np.tanh(c)
        hidden.append(h)
    return np.array(hidden)


class TestReferenceOps(GradCheck):
    def test_conv1d_matches_loops(self):
        x = self.rng.normal(size=(9, 2))
        for width in (1, 2, 3, 8):
            kernels = self.rng.normal(size=(3, width, 2))
            bias = self.rng.normal(size=(3,))
            out = ad.conv1d(x, kernels, bias)
            np.testing.assert_allclose(
                out.data, loop_conv1d(x, kernels, bias), atol=1e-6, err_msg=str(width)
            )

    def test_dense_matches_loops(self):
        x = self.rng.normal(size=(5,))
        w = self.rng.normal(size=(5, 3))
        b = self.rng.normal(size=(3,))
        np.testing.assert_allclose(ad.dense(x, w, b).data, loop_dense(x, w, b), atol=1e-6)

    def test_lstm_matches_loops(self):
        x = self.rng.normal(size=(6, 3))
        w_ih = self.rng.normal(scale=0.5, size=(3, 8))
        w_hh = self.rng.normal(scale=0.5, size=(2, 8))
        bias = self.rng.normal(size=(8,))
        out = ad.lstm_forward(x, w_ih, w_hh, bias)
        np.testing.assert_allclose(out.data, loop_lstm(x, w_ih, w_hh, bias), atol=1e-6)

    def test_lstm_single_step_by_hand(self):
        # one input feature, one unit: gate pre-activations are x * w + b
        w_ih = np.array([[1.0, 2.0, 3.0, 4.0]])
        bias = np.array([0.0, -1.0, 0.5, 0.0])
        out = ad.lstm_forward(np.array([[0.5]]), w_ih, np.zeros((1, 4)), bias)
        i = 1 / (1 + np.exp(-0.5))
        g = np.tanh(2.0)
        o = 1 / (1 + np.exp(-2.0))
        # the forget gate multiplies a zero cell state
        expected = o * np.tanh(i * g)
        self.assertAlmostEqual(out.data[0, 0], expected, places=12)

    def test_sum_over_time(self):
        out = ad.sum_over_time(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [9.0, 12.0])

    def test_crossentropy_gradient_is_softmax_minus_one_hot(self):
        logits = ad.Tensor(self.rng.normal(size=(5, 4)))
        labels = np.array([0, 3, 1, 1, 2])
        with ad.GradientTape() as tape:
            tape.watch(logits)
            loss = ad.categorical_crossentropy(ad.softmax(logits), labels, reduction="sum")
        (grad,) = tape.gradient(loss)
        expected = ad.softmax(logits.data).data - np.eye(4)[labels]
        np.testing.assert_allclose(grad, expected, atol=1e-10)

    def test_backward_is_linear(self):
        a = ad.Tensor(self.rng.normal(size=(3, 4)))

        def gradient(build):
            with ad.GradientTape() as tape:
                tape.watch(a)
                loss = build(a)
            return tape.gradient(loss)[0]

        def first(t):
            return (ad.tanh(t) ** 2).sum()

        def second(t):
            return (ad.sigmoid(t) * t).sum()

        combined = gradient(lambda t: first(t) * 2.5 - second(t) * 0.5)
        np.testing.assert_allclose(
            combined, 2.5 * gradient(first) - 0.5 * gradient(second), atol=1e-12
        )


class TestTape(TestCase):
    def test_unwatched_source_gets_zeros(self):
        a, b = ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, 4.0])
        with ad.GradientTape() as tape:
            tape.watch(a, b)
            loss = (a * a).sum()
        grad_a, grad_b = tape.gradient(loss)
        np.testing.assert_allclose(grad_a, [2.0, 4.0])
        np.testing.assert_allclose(grad_b, [0.0, 0.0])

    def test_frozen_after_backward(self):
        a = ad.Tensor([1.0, 2.0])
        with ad.GradientTape() as tape:
            tape.watch(a)
            loss = a.sum()
            ad.backward(tape, loss)
            self.assertTrue(tape.frozen)
            with self.assertRaises(ContractError):
                a * 2.0

    def test_scalar_loss_required(self):
        a = ad.Tensor([1.0, 2.0])
        with ad.GradientTape() as tape:
            tape.watch(a)
            out = a * 2.0
        with self.assertRaises(ContractError):
            tape.gradient(out)

    def test_nonfinite_names_op_and_layer(self):
        with self.assertRaises(NumericalError) as ctx:
            with ad.name_scope("head"):
                with np.errstate(divide="ignore"):
                    ad.log(ad.Tensor([0.0, 1.0]))
        self.assertEqual(ctx.exception.op, "log")
        self.assertEqual(ctx.exception.layer, "head")
        self.assertEqual(ctx.exception.exit_code, 3)

    def test_precision_context(self):
        self.assertEqual(ad.Tensor([1.0]).dtype, np.float32)
        with ad.precision("float64"):
            self.assertEqual(ad.Tensor([1.0]).dtype, np.float64)
        self.assertEqual(ad.Tensor([1.0]).dtype, np.float32)
        with self.assertRaises(ContractError):
            ad.set_precision("float16")

    def test_dump_csv(self):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "t.csv"
            ad.dump_csv(ad.Tensor([[1.5, 2.0], [3.0, 4.0]]), path)
            self.assertEqual(path.read_text().split(), ["1.5", "2", "3", "4"])
