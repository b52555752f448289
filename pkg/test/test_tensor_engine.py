import unittest
from unittest import TestCase

import numpy as np

from tensor_engine import functional as F
from tensor_engine.errors import DTypeError, GraphError, ShapeError
from tensor_engine.optim import Adam, AdamState, adam_step
from tensor_engine.rng import Stream
from tensor_engine.tensor import Tensor, backward, no_grad

SEED = 11


def naive_conv2d(x, w, b, pad):
    """Direct loop cross-correlation used as the oracle."""
    n, cin, height, width = x.shape
    cout, _, k, _ = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h = padded.shape[2] - k + 1
    out_w = padded.shape[3] - k + 1
    out = np.zeros((n, cout, out_h, out_w))
    for i in range(n):
        for o in range(cout):
            for r in range(out_h):
                for c in range(out_w):
                    out[i, o, r, c] = np.sum(padded[i, :, r:r + k, c:c + k] * w[o]) + b[o]
    return out


def naive_conv_transpose2d(x, w, b):
    n, cin, height, width = x.shape
    _, cout, k, _ = w.shape
    out = np.zeros((n, cout, height * k, width * k))
    for i in range(n):
        for ci in range(cin):
            for r in range(height):
                for c in range(width):
                    out[i, :, r * k:(r + 1) * k, c * k:(c + 1) * k] += x[i, ci, r, c] * w[ci]
    return out + b[None, :, None, None]


class TensorTest(TestCase):

    def test_broadcast_add_gradient(self):
        """A broadcast operand receives the summed gradient"""
        a = Tensor(np.ones((2, 3)), requires_grad=True, dtype=np.float64)
        b = Tensor(np.arange(3.0), requires_grad=True, dtype=np.float64)
        backward((a + b).sum())
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_gradients_accumulate(self):
        """Two backward passes without zeroing add up"""
        a = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        backward((a * a).sum())
        backward((a * a).sum())
        np.testing.assert_array_equal(a.grad, [4.0, 8.0])

    def test_shared_input_gradient(self):
        """A tensor used twice gets both contributions"""
        a = Tensor([3.0], requires_grad=True, dtype=np.float64)
        backward((a * a + a).sum())
        np.testing.assert_array_equal(a.grad, [7.0])

    def test_no_grad_records_nothing(self):
        """Operations inside no_grad() build no tape"""
        a = Tensor([1.0], requires_grad=True)
        with no_grad():
            out = a * 2.0
        self.assertFalse(out.requires_grad)
        self.assertIsNone(out.node)

    def test_backward_needs_scalar(self):
        """backward() refuses a non-scalar or detached loss"""
        a = Tensor(np.ones(3), requires_grad=True)
        self.assertRaises(GraphError, backward, a * 2.0)
        self.assertRaises(GraphError, backward, Tensor([1.0]))

    def test_mixed_dtypes(self):
        """float32 and float64 operands do not mix"""
        a = Tensor(np.ones(2, dtype=np.float32))
        b = Tensor(np.ones(2, dtype=np.float64))
        self.assertRaises(DTypeError, lambda: a + b)

    def test_integer_dtype_rejected(self):
        """Only float32 and float64 tensors exist"""
        self.assertRaises(DTypeError, Tensor, np.ones(2), dtype=np.int32)

    def test_empty_axis(self):
        """Zero-extent axes are a ShapeError naming the axis"""
        try:
            Tensor(np.zeros((2, 0)))
        except ShapeError as e:
            self.assertEqual(e.axis, 'axis 1')
        else:
            self.fail('expected ShapeError')

    def test_detach(self):
        """detach() keeps values and drops history"""
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = (a * 3.0).detach()
        self.assertFalse(b.requires_grad)
        np.testing.assert_array_equal(b.data, [3.0, 6.0])


class FunctionalTest(TestCase):

    def setUp(self):
        self.stream = Stream(SEED, 'functional-test')

    def test_conv2d_matches_loop(self):
        """'same' conv2d equals a direct loop with one pixel of padding"""
        x = self.stream.split('x').normal((2, 3, 5, 6))
        w = self.stream.split('w').normal((4, 3, 3, 3))
        b = self.stream.split('b').normal((4,))
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), padding='same')
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, 1), rtol=1e-10, atol=1e-12)

    def test_conv2d_valid_shape(self):
        """'valid' padding shrinks each side by k - 1"""
        out = F.conv2d(Tensor(np.ones((1, 2, 6, 5))), Tensor(np.ones((3, 2, 3, 3))), padding='valid')
        self.assertEqual(out.shape, (1, 3, 4, 3))

    def test_conv2d_channel_mismatch(self):
        """A weight built for other input channels names the channel axis"""
        try:
            F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 5, 3, 3))))
        except ShapeError as e:
            self.assertEqual(e.axis, 'channel')
        else:
            self.fail('expected ShapeError')

    def test_conv2d_kernel_larger_than_input(self):
        """A 3x3 'valid' kernel does not fit a 2x2 input"""
        self.assertRaises(ShapeError, F.conv2d, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))),
                          None, 'valid')

    def test_conv_transpose2d_matches_loop(self):
        """Each input pixel paints a k x k tile of the output"""
        x = self.stream.split('x').normal((2, 3, 3, 4))
        w = self.stream.split('w').normal((3, 2, 2, 2))
        b = self.stream.split('b').normal((2,))
        out = F.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=2)
        self.assertEqual(out.shape, (2, 2, 6, 8))
        np.testing.assert_allclose(out.data, naive_conv_transpose2d(x, w, b), rtol=1e-10, atol=1e-12)

    def test_maxpool_gradient_goes_to_max(self):
        """Only the winning pixel of each window gets gradient"""
        x = Tensor(np.array([[[[1.0, 2.0], [4.0, 3.0]]]]), requires_grad=True)
        out = F.maxpool2d(x)
        self.assertEqual(out.data.ravel().tolist(), [4.0])
        backward(out.sum())
        np.testing.assert_array_equal(x.grad[0, 0], [[0.0, 0.0], [1.0, 0.0]])

    def test_maxpool_odd_extent(self):
        """An odd extent cannot be halved"""
        self.assertRaises(ShapeError, F.maxpool2d, Tensor(np.ones((1, 1, 3, 4))))

    def test_concat_and_slice(self):
        """Concatenation stacks channels; slicing takes them back"""
        a = Tensor(np.zeros((1, 2, 2, 2)))
        b = Tensor(np.ones((1, 3, 2, 2)))
        joined = F.concat_channels(a, b)
        self.assertEqual(joined.shape, (1, 5, 2, 2))
        np.testing.assert_array_equal(F.slice_channels(joined, 2, 5).data, b.data)

    def test_concat_extent_mismatch(self):
        """Maps of different extent cannot be concatenated"""
        self.assertRaises(ShapeError, F.concat_channels, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 4, 4))))

    def test_batchnorm_updates_running_stats(self):
        """Training mode normalises by the batch and moves the running
        statistics with momentum 0.99"""
        x = self.stream.split('x').normal((4, 2, 3, 3)) * 3.0 + 1.0
        rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
        out = F.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(rm.data, 0.01 * x.mean(axis=(0, 2, 3)), rtol=1e-10)
        np.testing.assert_allclose(rv.data, 0.99 + 0.01 * x.var(axis=(0, 2, 3)), rtol=1e-10)

    def test_batchnorm_inference_uses_running_stats(self):
        """Inference mode leaves the running statistics alone"""
        rm, rv = Tensor(np.full(1, 2.0)), Tensor(np.full(1, 4.0))
        x = Tensor(np.full((1, 1, 2, 2), 6.0))
        out = F.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=False)
        np.testing.assert_allclose(out.data, 4.0 / np.sqrt(4.0 + 1e-3))
        self.assertEqual(rm.data.tolist(), [2.0])

    def test_dropout_identity_at_inference(self):
        """Inference-mode dropout returns its input unchanged"""
        x = Tensor(np.ones((2, 3)))
        self.assertIs(F.dropout(x, 0.5, False, None), x)

    def test_dropout_scaling(self):
        """Survivors are scaled by 1 / (1 - rate); the same stream drops the
        same units"""
        x = Tensor(np.ones((1, 1, 20, 20)))
        first = F.dropout(x, 0.5, True, Stream(SEED, 'drop'))
        second = F.dropout(x, 0.5, True, Stream(SEED, 'drop'))
        self.assertEqual(set(np.unique(first.data).tolist()) <= {0.0, 2.0}, True)
        np.testing.assert_array_equal(first.data, second.data)

    def test_upsample_nearest(self):
        """Every pixel becomes a factor x factor block"""
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        out = F.upsample_nearest(x, 2)
        self.assertEqual(out.shape, (1, 1, 4, 4))
        self.assertEqual(out.data[0, 0, 1, 1], 0.0)
        self.assertEqual(out.data[0, 0, 3, 3], 3.0)
        backward(out.sum())
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))

    def test_sigmoid_range(self):
        """sigmoid stays inside [0, 1] for extreme inputs"""
        out = F.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0])))
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])


class OptimTest(TestCase):

    def test_first_step_moves_by_lr(self):
        """Adam's first step is lr * sign(grad) up to eps"""
        param = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        state = AdamState(lr=0.01)
        adam_step({'p': param}, {'p': np.array([0.5, -2.0])}, state)
        np.testing.assert_allclose(param.data, [0.99, -0.99], rtol=1e-6)
        self.assertEqual(state.t, 1)

    def test_second_step_matches_formula(self):
        """Two steps follow lr_t * m / (sqrt(v) + eps)"""
        param = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState(lr=0.1)
        grads = [0.2, -0.4]
        for g in grads:
            adam_step({'p': param}, {'p': np.array([g])}, state)

        m = v = 0.0
        expected = 0.0
        for t, g in enumerate(grads, 1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            lr_t = 0.1 * np.sqrt(1 - 0.999 ** t) / (1 - 0.9 ** t)
            expected -= lr_t * m / (np.sqrt(v) + 1e-7)
        np.testing.assert_allclose(param.data, [expected], rtol=1e-10)

    def test_missing_gradient_left_alone(self):
        """A parameter without a gradient keeps its value"""
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([1.0]), requires_grad=True)
        a.grad = np.array([1.0])
        Adam({'a': a, 'b': b}, lr=0.1).step()
        self.assertEqual(b.data.tolist(), [1.0])
        self.assertNotEqual(a.data.tolist(), [1.0])

    def test_gradient_shape_checked(self):
        """A gradient of the wrong shape is refused before any update"""
        param = Tensor(np.zeros(3), requires_grad=True)
        self.assertRaises(ShapeError, adam_step, {'p': param}, {'p': np.zeros(2)}, AdamState())


class StreamTest(TestCase):

    def test_named_splits_are_independent(self):
        """A stream's numbers depend on its name, not on what else was drawn"""
        root = Stream(SEED)
        first = root.split('a').random(5)
        root.split('b').random(100)
        np.testing.assert_array_equal(first, Stream(SEED).split('a').random(5))
        self.assertFalse(np.array_equal(first, root.split('b').random(5)))

    def test_choice_without_replacement(self):
        """choice() never repeats an item"""
        picks = Stream(SEED).choice(np.arange(10), 10)
        self.assertEqual(sorted(picks.tolist()), list(range(10)))


if __name__ == '__main__':
    unittest.main()
