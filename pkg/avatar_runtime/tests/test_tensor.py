import unittest

import numpy as np

from avatar_runtime import tensor as T
from avatar_runtime.exceptions import NumericError, ShapeError, ValidationError
from avatar_runtime.layers import Linear, RMSNorm
from avatar_runtime.optim import Adam
from avatar_runtime.tests.helpers import reference_and_audio, tiny_model


class MatmulTest(unittest.TestCase):

    def test_identity(self):
        b = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(T.matmul(np.eye(3), b).data, b)

    def test_hand_computed(self):
        out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        a = T.parameter(rng.standard_normal((4, 5)))
        b = T.parameter(rng.standard_normal((5, 2)))
        self.assertLess(T.gradcheck(lambda: T.tensor_sum(T.matmul(a, b)), [a, b]), 1e-4)


class SoftmaxTest(unittest.TestCase):

    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax([0.0, 0.0]).data, [0.5, 0.5])

    def test_large_logits_do_not_overflow(self):
        out = T.softmax([1000.0, 0.0]).data
        self.assertTrue(np.all(np.isfinite(out)))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(1).standard_normal((5, 7)) * 10
        np.testing.assert_allclose(T.softmax(x, axis=-1).data.sum(axis=-1), np.ones(5), atol=1e-6)

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        x = T.parameter(rng.standard_normal((3, 4)))
        weights = rng.standard_normal((3, 4))
        self.assertLess(T.gradcheck(lambda: T.tensor_sum(T.softmax(x, axis=-1) * weights), [x]), 1e-4)

    def test_bad_axis(self):
        with self.assertRaises(ShapeError):
            T.softmax(np.ones((2, 2)), axis=3)


class ElementwiseTest(unittest.TestCase):

    def test_rmsnorm_of_constant_vector(self):
        np.testing.assert_allclose(T.rmsnorm(np.full(5, -3.0), np.ones(5)).data, -np.ones(5), atol=1e-8)
        np.testing.assert_allclose(T.rmsnorm(np.full(4, 2.5), np.ones(4)).data, np.ones(4), atol=1e-8)

    def test_silu_zero(self):
        self.assertEqual(T.silu(0.0).item(), 0.0)

    def test_rmsnorm_matmul_composite(self):
        rng = np.random.default_rng(3)
        x = T.parameter(rng.standard_normal((3, 4)))
        w = T.parameter(rng.standard_normal((4, 5)))
        scale = T.parameter(rng.uniform(0.5, 1.5, 5))
        target = rng.standard_normal((3, 5))

        def loss():
            out = T.rmsnorm(T.matmul(x, w), scale)
            return T.tensor_sum(out * target)

        self.assertLess(T.gradcheck(loss, [x, w, scale]), 1e-4)

    def test_unary_ops(self):
        rng = np.random.default_rng(4)
        x = T.parameter(rng.uniform(0.2, 2.0, (2, 3)))
        for op in (T.gelu, T.silu, T.tanh, T.sigmoid, T.softplus, T.exp, T.log):
            self.assertLess(T.gradcheck(lambda: T.tensor_sum(op(x)), [x]), 1e-4, op.__name__)

    def test_broadcast_gradients_reduce_to_input_shape(self):
        rng = np.random.default_rng(5)
        a = T.parameter(rng.standard_normal((3, 4)))
        b = T.parameter(rng.standard_normal(4))
        c = T.parameter(rng.standard_normal((3, 1)))
        self.assertLess(T.gradcheck(lambda: T.tensor_sum((a + b) * c / (b * b + 1.0)), [a, b, c]), 1e-4)
        self.assertIsNone(b.grad)

    def test_shape_ops(self):
        rng = np.random.default_rng(6)
        x = T.parameter(rng.standard_normal((2, 3, 4)))
        weights = rng.standard_normal((4, 6))

        def loss():
            moved = T.reshape(T.transpose(x, (2, 0, 1)), (4, 6))
            joined = T.concat([moved[:2], T.stack([moved[3], moved[2]])], axis=0)
            return T.tensor_sum(joined * weights) + T.mean(x ** 2)

        self.assertLess(T.gradcheck(loss, [x]), 1e-4)

    def test_mismatched_shapes(self):
        with self.assertRaises(ShapeError):
            T.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_nonfinite_detected(self):
        with self.assertRaises(NumericError):
            T.assert_finite(T.log(np.array([0.0])), "log")


class BackwardTest(unittest.TestCase):

    def test_sum_gives_ones(self):
        x = T.parameter(np.random.default_rng(0).standard_normal((2, 3)))
        T.backward(T.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_double(self):
        data = np.random.default_rng(1).standard_normal(5)
        x = T.parameter(data)
        T.backward(T.tensor_sum(x * x))
        np.testing.assert_allclose(x.grad, 2 * data)

    def test_gradients_accumulate_until_reset(self):
        x = T.parameter(np.ones(3))
        T.backward(T.tensor_sum(x))
        T.backward(T.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))
        T.zero_grads([x])
        self.assertIsNone(x.grad)

    def test_shared_subexpression_visited_once(self):
        x = T.parameter(np.array([3.0]))
        y = x * x
        T.backward(T.tensor_sum(y + y))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_non_scalar_loss(self):
        with self.assertRaises(ShapeError):
            T.backward(T.parameter(np.ones(2)) * 2.0)

    def test_constant_loss(self):
        with self.assertRaises(ValidationError):
            T.backward(T.tensor_sum(np.ones(2)))

    def test_no_grad_records_nothing(self):
        x = T.parameter(np.ones(2))
        with T.no_grad():
            y = x * 2.0
        self.assertFalse(y.requires_grad)
        self.assertTrue(y.is_leaf)

    def test_forward_is_deterministic(self):
        model = tiny_model(seed=3)
        reference, audio = reference_and_audio(model.config, model.config.window_frames)
        noisy = np.random.default_rng(0).standard_normal((6, 2, 4))
        first = model.teacher_forward(noisy, 0.5, reference, audio).data
        second = model.teacher_forward(noisy, 0.5, reference, audio).data
        np.testing.assert_array_equal(first, second)

    def test_toy_dit_gradcheck(self):
        model = tiny_model(seed=4)
        reference, audio = reference_and_audio(model.config, model.config.window_frames)
        rng = np.random.default_rng(5)
        noisy = rng.standard_normal((6, 2, 4))
        target = rng.standard_normal((6, 2, 4))

        def loss():
            return T.tensor_sum(model.teacher_forward(noisy, 0.4, reference, audio, causal=True) * target)

        error = T.gradcheck(loss, model.parameters(), coords=3, rng=np.random.default_rng(6), floor=1e-4)
        self.assertLess(error, 1e-3)


class LayersTest(unittest.TestCase):

    def test_linear_and_state_dict(self):
        rng = np.random.default_rng(0)
        layer = Linear(3, 2, rng)
        twin = Linear(3, 2, np.random.default_rng(1))
        twin.load_state_dict(layer.state_dict())
        x = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(layer(x).data, twin(x).data)
        with self.assertRaises(ShapeError):
            layer(np.ones((4, 2)))

    def test_state_dict_mismatch(self):
        layer = Linear(3, 2, np.random.default_rng(0))
        with self.assertRaises(ShapeError):
            layer.load_state_dict({"weight": np.zeros((3, 2))})
        with self.assertRaises(ShapeError):
            layer.load_state_dict({"weight": np.zeros((2, 2)), "bias": np.zeros(2)})

    def test_clone_is_independent(self):
        norm = RMSNorm(3)
        twin = norm.clone()
        twin.weight.data[0] = 5.0
        self.assertEqual(norm.weight.data[0], 1.0)


class AdamTest(unittest.TestCase):

    def test_minimises_quadratic(self):
        x = T.parameter(np.array([3.0, -2.0]))
        optimizer = Adam([x], lr=0.1)
        for _ in range(500):
            optimizer.zero_grad()
            T.backward(T.tensor_sum(x * x))
            optimizer.step()
        np.testing.assert_allclose(x.data, [0.0, 0.0], atol=5e-2)

    def test_gradient_clipping(self):
        x = T.parameter(np.array([0.0]))
        optimizer = Adam([x], lr=0.1, max_grad_norm=1.0)
        x.grad = np.array([100.0])
        self.assertAlmostEqual(optimizer.grad_norm(), 100.0)
        optimizer.step()
        first_moment, _ = optimizer.moments[0]
        self.assertAlmostEqual(first_moment[0], 0.1, places=12)

    def test_nonfinite_gradient(self):
        x = T.parameter(np.array([0.0]))
        x.grad = np.array([np.nan])
        with self.assertRaises(NumericError):
            Adam([x]).step()


if __name__ == "__main__":
    unittest.main()
