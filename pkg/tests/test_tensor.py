"""Tests for the tape-based tensor core and the Adam optimizer."""
import numpy as np
import pytest

from rsc_engine import tensor as T
from rsc_engine.optim import AdamState, OptimizerError, adam_step
from rsc_engine.tensor import GradientError, Tensor, TensorError, backward, stop_gradient


class TestForward:

    def test_tensors_are_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0
        copy = t.numpy()
        copy[0] = 5.0
        assert t.data[0] == 1.0

    def test_constants_record_no_nodes(self):
        out = Tensor([1.0, 2.0]) * 3.0 + 1.0
        assert out.node is None
        assert not out.requires_grad

    def test_broadcasting_arithmetic(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.arange(3.0))
        np.testing.assert_array_equal((a + b).data, np.ones((2, 3)) + np.arange(3.0))
        np.testing.assert_array_equal((2.0 - b).data, 2.0 - np.arange(3.0))

    def test_item_requires_single_element(self):
        assert Tensor(3.5).item() == 3.5
        with pytest.raises(TensorError):
            Tensor([1.0, 2.0]).item()

    def test_conv2d_matches_direct_sum(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        out = T.conv2d(x, w, stride=1, padding=1).data
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((1, 3, 5, 5))
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    expected[0, o, i, j] = np.sum(padded[0, :, i:i + 3, j:j + 3] * w[o])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_conv2d_stride_two_halves_size(self, rng):
        out = T.conv2d(rng.normal(size=(2, 1, 16, 16)), rng.normal(size=(4, 1, 3, 3)), stride=2)
        assert out.shape == (2, 4, 8, 8)

    def test_conv2d_rejects_channel_mismatch(self, rng):
        with pytest.raises(TensorError):
            T.conv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 3, 3)))

    def test_cosine_similarity_zero_norm(self):
        with pytest.raises(TensorError):
            T.cosine_similarity(np.zeros(3), np.ones(3))


class TestBackward:

    def test_product_rule(self):
        a = Tensor(3.0, requires_grad=True)
        b = Tensor(4.0, requires_grad=True)
        backward(a * b + a)
        assert a.grad == pytest.approx(5.0)
        assert b.grad == pytest.approx(3.0)

    def test_gradients_accumulate_over_fanout(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        y = T.tensor_sum(x * x) + T.tensor_sum(x)
        backward(y)
        np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0)

    def test_broadcast_gradient_is_reduced(self):
        a = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        backward(T.tensor_sum(a + b))
        np.testing.assert_array_equal(b.grad, np.full(3, 4.0))

    def test_reverse_order_matches_recording_order(self):
        x = Tensor(2.0, requires_grad=True)
        y = T.exp(x)
        z = T.log(y) * y
        graph = backward(z)
        assert graph.ops() == ['exp', 'log', 'mul']
        assert x.grad == pytest.approx(np.exp(2.0) * (1.0 + 2.0))

    def test_root_must_be_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(TensorError):
            backward(x * 2.0)

    def test_stop_gradient_blocks_path(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = T.tensor_sum(stop_gradient(x) * x)
        backward(y)
        np.testing.assert_allclose(x.grad, x.data)

    def test_unreached_wrt_gets_zeros(self):
        x = Tensor(np.ones(2), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        backward(T.tensor_sum(x), wrt=[x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))

    def test_non_finite_gradient_names_node(self):
        x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
        with pytest.raises(GradientError, match='log'):
            backward(T.tensor_sum(T.log(x)))

    def test_fancy_getitem_accumulates(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        backward(T.tensor_sum(x[np.array([0, 2, 2])]))
        np.testing.assert_array_equal(x.grad, [1.0, 0.0, 2.0])

    def test_relu_subgradient_at_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        backward(T.tensor_sum(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


class TestAdam:

    def test_first_step_moves_by_learning_rate(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True, name='p')
        state = AdamState.for_params([p], learning_rate=0.1)
        (updated,) = adam_step([p], [np.array([3.0, -0.5])], state)
        np.testing.assert_allclose(updated.data, [0.9, -0.9], atol=1e-7)
        assert updated.requires_grad
        assert updated.name == 'p'
        assert state.step == 1

    def test_none_gradient_leaves_parameter(self):
        p = Tensor(np.ones(3), requires_grad=True)
        state = AdamState.for_params([p])
        (updated,) = adam_step([p], [None], state)
        np.testing.assert_array_equal(updated.data, p.data)

    def test_descends_a_quadratic(self):
        p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        state = AdamState.for_params([p], learning_rate=0.1)
        for _ in range(300):
            loss = T.squared_l2(p)
            backward(loss)
            (p,) = adam_step([p], [p.grad], state)
        assert np.linalg.norm(p.data) < 0.5

    def test_shape_mismatch(self):
        p = Tensor(np.ones(3), requires_grad=True)
        state = AdamState.for_params([p])
        with pytest.raises(OptimizerError):
            adam_step([p], [np.ones(2)], state)

    def test_rejected_step_leaves_state_untouched(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        state = AdamState.for_params([a, b], learning_rate=0.1)
        with pytest.raises(OptimizerError):
            adam_step([a, b], [np.ones(2), np.ones(4)], state)
        assert state.step == 0
        np.testing.assert_array_equal(state.m[0], np.zeros(2))
        np.testing.assert_array_equal(state.v[0], np.zeros(2))

    def test_invalid_decay(self):
        with pytest.raises(OptimizerError):
            AdamState([(2,)], beta1=1.0)
