import numpy as np
import pytest

from deskgan import tensor as T
from deskgan.tensor import Tensor, ShapeError, GraphError

from gradcheck import assert_grads_match


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        b = Tensor(np.array([[3.0], [4.0]]))
        assert np.array_equal(T.matmul(a, b).data, [[3.0], [4.0]])

    def test_by_hand(self):
        out = T.matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]])))
        assert np.array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradients_match_finite_differences(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def loss():
            c = T.matmul(a, b)
            return T.tsum(c * c)

        assert_grads_match(loss, [a, b])

    def test_associativity(self, rng):
        for _ in range(5):
            a, b, c = (rng.standard_normal((4, 4)) for _ in range(3))
            left = (Tensor(a) @ Tensor(b)) @ Tensor(c)
            right = Tensor(a) @ (Tensor(b) @ Tensor(c))
            assert np.abs(left.data - right.data).max() < 1e-10


class TestConv2d:
    def test_one_by_one_is_scaling(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.array([[[[2.0]]]]))
        assert np.array_equal(T.conv2d(x, w).data, [[[[2.0, 4.0], [6.0, 8.0]]]])

    def test_all_ones_summation(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        assert T.conv2d(x, w).data.reshape(()) == 9.0

    def test_output_size_formula(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 7, 9)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        out = T.conv2d(x, w, stride=2, pad=1)
        assert out.shape == (2, 4, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_non_positive_extent_raises(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_gradients_match_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)

        def loss():
            y = T.conv2d(x, w, stride=1, pad=1)
            return T.tsum(y * y)

        assert_grads_match(loss, [x, w])

    def test_strided_gradients(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)

        def loss():
            return T.tsum(T.relu(T.conv2d(x, w, stride=2, pad=0)))

        assert_grads_match(loss, [x, w])


class TestSoftmaxRows:
    def test_symmetry(self):
        out = T.softmax_rows(Tensor(np.array([[0.0, 0.0]])))
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_direct_value(self):
        out = T.softmax_rows(Tensor(np.array([[0.0, 1.0]])))
        assert np.abs(out.data - [0.26894, 0.73106]).max() < 1e-5

    def test_no_overflow_on_large_inputs(self):
        out = T.softmax_rows(Tensor(np.array([[1000.0, 1000.0]])))
        assert np.allclose(out.data, [[0.5, 0.5]])
        assert np.isfinite(out.data).all()

    def test_rows_sum_to_one(self, rng):
        for _ in range(10):
            s = Tensor(rng.standard_normal((6, 6)) * rng.uniform(0.1, 50))
            sums = T.softmax_rows(s).data.sum(axis=-1)
            assert np.abs(sums - 1.0).max() < 1e-6

    def test_batched_rows_sum_to_one(self, rng):
        out = T.softmax_rows(Tensor(rng.standard_normal((3, 5, 5))))
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-6

    def test_gradients(self, rng):
        s = Tensor(rng.standard_normal((4, 4)), requires_grad=True)

        def loss():
            p = T.softmax_rows(s)
            return T.tsum(p * p)

        assert_grads_match(loss, [s])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        T.tsum(x).backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_square_rule(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.tsum(x * x).backward()
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_accumulation_doubles(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)

        def run():
            T.tsum(x * x * x).backward()

        run()
        once = x.grad.copy()
        run()
        assert np.array_equal(x.grad, 2 * once)

    def test_non_scalar_root_rejected(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with pytest.raises(GraphError):
            (x * x).backward()

    def test_fan_out_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        s = x + x
        T.tsum(s * s).backward()
        assert np.allclose(x.grad, 8 * x.data)

    def test_tape_visits_each_node_once(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        a = x * x
        b = a + a
        loss = T.tsum(b * a)
        tape = T.Tape.trace(loss)
        ids = [id(t) for t in tape.order]
        assert len(ids) == len(set(ids))
        # inputs precede consumers
        pos = {i: k for k, i in enumerate(ids)}
        for t in tape.order:
            for inp in t.node.inputs:
                if inp.node is not None:
                    assert pos[id(inp)] < pos[id(t)]

    def test_composite_graph_gradients(self, rng):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)

        def loss():
            y = T.softmax_rows(T.matmul(x, w))
            return T.tsum(y * T.tanh(x))

        assert_grads_match(loss, [x, w])


class TestNoGrad:
    def test_detached_inside_context(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with T.no_grad():
            y = x * x
        assert y.node is None

    def test_detach(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        d = (x * x).detach()
        assert d.node is None and not d.requires_grad


class TestElementwiseAndShapes:
    def test_limited_broadcast_bias_add(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)

        def loss():
            return T.tsum((x + b) * (x + b))

        assert_grads_match(loss, [x, b])

    def test_per_channel_scale(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
        s = Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)
        assert_grads_match(lambda: T.tsum(T.tanh(x * s)), [x, s])

    def test_reshape_transpose_roundtrip(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)

        def loss():
            y = T.transpose(x, (2, 0, 1))
            return T.tsum(T.reshape(y, (4, 6)) * T.reshape(y, (4, 6)))

        assert_grads_match(loss, [x])

    def test_mean_and_sqrt(self, rng):
        x = Tensor(np.abs(rng.standard_normal((3, 5))) + 0.5, requires_grad=True)
        assert_grads_match(lambda: T.tsum(T.sqrt(T.tmean(x * x, axis=1))), [x])

    def test_division(self, rng):
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 3)) + 3.0, requires_grad=True)
        assert_grads_match(lambda: T.tsum(a / b), [a, b])

    def test_gather_rows(self, rng):
        table = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        idx = np.array([0, 2, 2, 4])
        assert_grads_match(lambda: T.tsum(T.tanh(T.gather_rows(table, idx))), [table])

    def test_gather_rows_out_of_range(self, rng):
        with pytest.raises(IndexError):
            T.gather_rows(Tensor(np.zeros((3, 2))), np.array([3]))

    def test_take_per_row(self, rng):
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        idx = np.array([1, 0, 4, 2])
        assert_grads_match(lambda: T.tsum(T.take_per_row(x, idx) * T.take_per_row(x, idx)),
                           [x])

    def test_log_softmax_rows(self, rng):
        s = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        assert_grads_match(lambda: T.neg(T.tmean(T.take_per_row(
            T.log_softmax_rows(s), np.array([0, 1, 2])))), [s])

    def test_bmm_gradients(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 4, 2)), requires_grad=True)
        assert_grads_match(lambda: T.tsum(T.tanh(T.bmm(a, b))), [a, b])

    def test_channel_map_gradients(self, rng):
        w = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
        assert_grads_match(lambda: T.tsum(T.tanh(T.channel_map(w, x))), [w, x])

    def test_concat_gradients(self, rng):
        a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        assert_grads_match(lambda: T.tsum(T.tanh(T.concat([a, b], axis=0))), [a, b])


class TestInvariants:
    def test_finite_outputs_on_finite_inputs(self, rng):
        x = Tensor(rng.standard_normal((2, 2)) * 100)
        for out in (T.relu(x), T.tanh(x), T.softmax_rows(x), T.exp(Tensor(x.data / 100))):
            assert np.isfinite(out.data).all()

    def test_shape_length_consistency(self, rng):
        t = Tensor(rng.standard_normal((3, 4, 5)))
        assert int(np.prod(t.shape)) == t.data.size

    def test_gated_residual_identity_at_zero_gate(self, rng):
        x = Tensor(rng.standard_normal((2, 3)).astype(np.float32))
        o = Tensor(rng.standard_normal((2, 3)).astype(np.float32))
        gamma = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
        out = T.gated_residual(x, o, gamma)
        assert out.data.tobytes() == x.data.tobytes()

    def test_gated_residual_gradients(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        o = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        gamma = Tensor(np.array([0.37]), requires_grad=True)
        assert_grads_match(
            lambda: T.tsum(T.gated_residual(x, o, gamma) * T.gated_residual(x, o, gamma)),
            [x, o, gamma])
