import numpy as np
import pytest

from deskgan import tensor as T
from deskgan.tensor import Tensor, ShapeError
from deskgan.attention import SelfAttentionBlock

from gradcheck import assert_grads_match


def scalar_block():
    """C=1, C̄=1 block with all weights set to 1 (hand-checkable)."""
    blk = SelfAttentionBlock(1, reduction=1, rng=np.random.default_rng(0), dtype=np.float64)
    for w in (blk.w_f, blk.w_g, blk.w_h, blk.w_v):
        w.data[...] = 1.0
    return blk


class TestAttentionWeights:
    def test_zero_projections_give_uniform_rows(self, rng):
        blk = SelfAttentionBlock(4, reduction=2, rng=np.random.default_rng(1))
        blk.w_f.data[...] = 0.0
        blk.w_g.data[...] = 0.0
        x = Tensor(rng.standard_normal((2, 4, 6)).astype(np.float32))
        beta = blk.attention_weights(x)
        assert np.abs(beta.data - 1.0 / 6).max() < 1e-7

    def test_fresh_block_attends_uniformly(self, rng):
        # default init zeroes the query projection, so fresh energies vanish
        blk = SelfAttentionBlock(8, rng=np.random.default_rng(2))
        x = Tensor(rng.standard_normal((1, 8, 9)).astype(np.float32))
        beta = blk.attention_weights(x)
        assert np.abs(beta.data - 1.0 / 9).max() < 1e-7

    def test_two_location_scalar_case(self):
        blk = scalar_block()
        beta = blk.attention_weights(Tensor(np.array([[[0.0, 1.0]]])))
        assert np.abs(beta.data[0, 1] - [0.26894, 0.73106]).max() < 1e-5

    def test_rows_sum_to_one(self, rng):
        blk = SelfAttentionBlock(8, rng=np.random.default_rng(3))
        blk.w_f.data[...] = rng.standard_normal(blk.w_f.shape).astype(np.float32)
        x = Tensor(rng.standard_normal((3, 8, 16)).astype(np.float32))
        beta = blk.attention_weights(x).data
        assert np.abs(beta.sum(axis=-1) - 1.0).max() < 1e-6
        assert (beta >= 0).all()

    def test_location_permutation_permutes_rows_and_columns(self, rng):
        blk = SelfAttentionBlock(4, reduction=2, rng=np.random.default_rng(4),
                                 dtype=np.float64)
        blk.w_f.data[...] = rng.standard_normal(blk.w_f.shape)
        x = rng.standard_normal((1, 4, 5))
        perm = rng.permutation(5)
        beta = blk.attention_weights(Tensor(x)).data
        beta_p = blk.attention_weights(Tensor(x[:, :, perm])).data
        assert np.abs(beta_p[0] - beta[0][np.ix_(perm, perm)]).max() < 1e-12


class TestAttentionOutput:
    def test_scalar_hand_case(self):
        blk = scalar_block()
        x = Tensor(np.array([[[0.0, 1.0]]]))
        beta = blk.attention_weights(x)
        o = blk.attention_output(x, beta)
        assert np.abs(o.data.ravel() - [0.5, 0.73106]).max() < 1e-5

    def test_identity_weights_select_own_location(self, rng):
        blk = SelfAttentionBlock(4, reduction=2, rng=np.random.default_rng(5),
                                 dtype=np.float64)
        x = Tensor(rng.standard_normal((1, 4, 6)))
        eye = Tensor(np.eye(6)[None, :, :])
        o = blk.attention_output(x, eye).data
        expected = blk.w_v.data @ (blk.w_h.data @ x.data[0])
        assert np.abs(o[0] - expected).max() < 1e-12

    def test_constant_input_gives_constant_output(self, rng):
        blk = SelfAttentionBlock(4, reduction=2, rng=np.random.default_rng(6))
        blk.w_f.data[...] = rng.standard_normal(blk.w_f.shape).astype(np.float32)
        x = Tensor(np.tile(rng.standard_normal((1, 4, 1)).astype(np.float32), (1, 1, 8)))
        beta = blk.attention_weights(x)
        o = blk.attention_output(x, beta).data
        assert np.abs(o - o[:, :, :1]).max() < 1e-6

    def test_mismatched_locations_raise(self, rng):
        blk = SelfAttentionBlock(4, reduction=2, rng=np.random.default_rng(7))
        x = Tensor(np.zeros((1, 4, 6), dtype=np.float32))
        with pytest.raises(ShapeError):
            blk.attention_output(x, Tensor(np.zeros((1, 5, 5), dtype=np.float32)))


class TestForward:
    def test_fresh_block_is_bitwise_identity(self, rng):
        blk = SelfAttentionBlock(16, rng=np.random.default_rng(8))
        x = Tensor(rng.standard_normal((2, 16, 5, 5)).astype(np.float32))
        out = blk(x)
        assert out.data.tobytes() == x.data.tobytes()

    def test_zero_value_projection_keeps_input(self, rng):
        blk = SelfAttentionBlock(8, rng=np.random.default_rng(9))
        blk.gamma.data[...] = 1.0
        blk.w_v.data[...] = 0.0
        x = Tensor(rng.standard_normal((1, 8, 4, 4)).astype(np.float32))
        assert np.abs(blk(x).data - x.data).max() < 1e-7

    def test_channel_mismatch(self):
        blk = SelfAttentionBlock(8, rng=np.random.default_rng(10))
        with pytest.raises(ShapeError):
            blk(Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32)))

    def test_full_gradient_check_all_parameters(self, rng):
        blk = SelfAttentionBlock(6, reduction=2, rng=np.random.default_rng(11),
                                 dtype=np.float64)
        blk.w_f.data[...] = 0.3 * rng.standard_normal(blk.w_f.shape)
        blk.gamma.data[...] = 0.45
        x = Tensor(rng.standard_normal((2, 6, 3, 3)), requires_grad=True)
        params = [blk.w_f, blk.w_g, blk.w_h, blk.w_v, blk.gamma, x]
        assert_grads_match(lambda: T.tsum(T.tanh(blk(x))), params)

    def test_gate_gradient_nonzero_at_zero(self, rng):
        blk = SelfAttentionBlock(6, reduction=2, rng=np.random.default_rng(12),
                                 dtype=np.float64)
        blk.w_f.data[...] = rng.standard_normal(blk.w_f.shape)
        x = Tensor(rng.standard_normal((1, 6, 3, 3)))
        blk.gamma.zero_grad()
        T.tsum(blk(x) * blk(x)).backward()
        assert abs(blk.gamma.grad[0]) > 1e-6

    def test_spatial_permutation_equivariance(self, rng):
        blk = SelfAttentionBlock(4, reduction=2, rng=np.random.default_rng(13))
        blk.w_f.data[...] = rng.standard_normal(blk.w_f.shape).astype(np.float32)
        blk.gamma.data[...] = 0.8
        x = rng.standard_normal((2, 4, 3, 4)).astype(np.float32)
        n = 12
        perm = rng.permutation(n)
        flat = x.reshape(2, 4, n)
        out = blk(Tensor(x)).data.reshape(2, 4, n)
        out_p = blk(Tensor(flat[:, :, perm].reshape(2, 4, 3, 4))).data.reshape(2, 4, n)
        assert np.abs(out_p - out[:, :, perm]).max() < 1e-6


class TestQueryMaps:
    def test_uniform_for_zero_weights(self, rng):
        blk = SelfAttentionBlock(4, reduction=2, rng=np.random.default_rng(14))
        blk.w_f.data[...] = 0.0
        x = Tensor(rng.standard_normal((1, 4, 3, 3)).astype(np.float32))
        amap = blk.attention_map_for_query(x, (1, 1))
        assert np.abs(amap.data - 1.0 / 9).max() < 1e-7

    def test_sums_to_one_random_weights(self, rng):
        blk = SelfAttentionBlock(4, reduction=2, rng=np.random.default_rng(15))
        blk.w_f.data[...] = rng.standard_normal(blk.w_f.shape).astype(np.float32)
        x = Tensor(rng.standard_normal((1, 4, 4, 4)).astype(np.float32))
        amap = blk.attention_map_for_query(x, (2, 3)).data
        assert abs(amap.sum() - 1.0) < 1e-6 and (amap >= 0).all()

    def test_matches_attention_weights_row(self, rng):
        blk = SelfAttentionBlock(4, reduction=2, rng=np.random.default_rng(16))
        blk.w_f.data[...] = rng.standard_normal(blk.w_f.shape).astype(np.float32)
        x = rng.standard_normal((1, 4, 3, 4)).astype(np.float32)
        beta = blk.attention_weights(Tensor(x.reshape(1, 4, 12))).data
        amap = blk.attention_map_for_query(Tensor(x), (2, 1)).data
        assert np.array_equal(amap.reshape(-1), beta[0, 2 * 4 + 1])

    def test_out_of_bounds_query(self, rng):
        blk = SelfAttentionBlock(4, reduction=2, rng=np.random.default_rng(17))
        x = Tensor(np.zeros((1, 4, 3, 3), dtype=np.float32))
        with pytest.raises(IndexError):
            blk.attention_map_for_query(x, (3, 0))


class TestCostScaling:
    def test_multiply_count_follows_quadratic_model(self, rng):
        """Counted multiplies must equal 2·B·N²·C̄ + 4·B·N·C·C̄ exactly."""
        c, red = 16, 8
        cbar = c // red
        blk = SelfAttentionBlock(c, reduction=red, rng=np.random.default_rng(18))
        counts = {}
        for hw in (4, 8):
            n = hw * hw
            x = Tensor(rng.standard_normal((2, c, hw, hw)).astype(np.float32))
            T.reset_flop_counter()
            blk(x)
            counts[n] = T.read_flop_counter()
            T.stop_flop_counter()
            assert counts[n] == 2 * 2 * n * n * cbar + 4 * 2 * n * c * cbar
        # the N² term dominates as N grows: quadrupling N multiplies cost
        # by ~16 in the quadratic regime
        ratio = counts[64] / counts[16]
        assert ratio > 4.0  # strictly superlinear
        quad_16 = 2 * 2 * 16 * 16 * cbar
        quad_64 = 2 * 2 * 64 * 64 * cbar
        assert counts[64] - counts[16] * (64 / 16) == quad_64 - quad_16 * 4
