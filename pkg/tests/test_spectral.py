import logging

import numpy as np
import pytest

from deskgan import tensor as T
from deskgan.tensor import Tensor
from deskgan.spectral import (SpectralNormState, reshape_to_matrix, matrix_to_weight,
                              power_iteration_step, normalized_weight)

from gradcheck import assert_grads_match


def svd_sigma(w):
    """SVD oracle for the true top singular value."""
    return float(np.linalg.svd(w.reshape(w.shape[0], -1), compute_uv=False)[0])


def random_gapped_matrix(rng, rows, cols, gap=1.5):
    """Random matrix whose top two singular values are separated by ``gap``."""
    u, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
    k = min(rows, cols)
    s = np.sort(rng.uniform(0.2, 1.0, size=k))[::-1]
    s[0] = s[1] * gap
    return (u[:, :k] * s) @ v[:, :k].T


class TestReshape:
    def test_linear_unchanged(self, rng):
        w = Tensor(rng.standard_normal((4, 3)))
        assert reshape_to_matrix(w) is w

    def test_conv_shape(self, rng):
        w = Tensor(rng.standard_normal((2, 3, 3, 3)))
        assert reshape_to_matrix(w).shape == (2, 27)

    def test_roundtrip(self, rng):
        w = rng.standard_normal((2, 3, 3, 3))
        mat = reshape_to_matrix(Tensor(w)).data
        assert np.array_equal(matrix_to_weight(mat, w.shape), w)


class TestPowerIteration:
    def test_diag_converges_to_top_value(self):
        w = np.diag([2.0, 1.0])
        state = SpectralNormState(w, np.random.default_rng(0))
        state.u[...] = np.array([1.0, 1.0]) / np.sqrt(2)
        sigma = 0.0
        for _ in range(50):
            sigma, state = power_iteration_step(w, state)
        assert abs(sigma - 2.0) < 1e-6

    def test_identity_one_step(self, rng):
        for seed in range(3):
            state = SpectralNormState(np.eye(4), np.random.default_rng(seed))
            sigma, _ = power_iteration_step(np.eye(4), state)
            assert abs(sigma - 1.0) < 1e-12

    def test_matches_svd_after_100_steps(self, rng):
        w = rng.standard_normal((8, 12))
        state = SpectralNormState(w, rng)
        for _ in range(100):
            sigma, state = power_iteration_step(w, state)
        assert abs(sigma - svd_sigma(w)) < 1e-6

    def test_zero_matrix_degenerate(self, rng):
        w = np.zeros((3, 3))
        state = SpectralNormState(w, rng)
        u_before = state.u.copy()
        sigma, state = power_iteration_step(w, state)
        assert sigma == 0.0
        assert np.array_equal(state.u, u_before)

    def test_sigma_never_overestimates(self, rng):
        for _ in range(10):
            w = rng.standard_normal((6, 9))
            state = SpectralNormState(w, rng)
            for _ in range(30):
                sigma, state = power_iteration_step(w, state)
            assert sigma <= svd_sigma(w) + 1e-9

    def test_u_stays_unit_norm_many_steps(self, rng):
        w = rng.standard_normal((5, 7)).astype(np.float64)
        state = SpectralNormState(w, rng)
        for i in range(10_000):
            power_iteration_step(w, state)
            if i % 1000 == 0:
                assert abs(np.linalg.norm(state.u) - 1.0) < 1e-6
        assert abs(np.linalg.norm(state.u) - 1.0) < 1e-6

    def test_warmup_relative_accuracy_with_gap(self, rng):
        for _ in range(5):
            w = random_gapped_matrix(rng, 8, 6, gap=1.2)
            state = SpectralNormState(w, rng)
            for _ in range(50):
                sigma, state = power_iteration_step(w, state)
            true = svd_sigma(w)
            assert abs(sigma - true) / true < 1e-4


class TestNormalizedWeight:
    def test_known_sigma_three(self, rng):
        w64 = np.zeros((2, 2))
        w64[0, 0], w64[1, 1] = 3.0, 1.0
        w = Tensor(w64, requires_grad=True)
        state = SpectralNormState(w64, rng)
        for _ in range(50):
            power_iteration_step(w.data, state)
        out = normalized_weight(w, state, training=False)
        assert abs(svd_sigma(out.data) - 1.0) < 1e-2

    def test_already_normalized_nearly_unchanged(self, rng):
        u, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        v, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        w64 = (u * np.array([1.0, 0.6, 0.3, 0.1])) @ v.T
        w = Tensor(w64)
        state = SpectralNormState(w64, rng)
        for _ in range(100):
            power_iteration_step(w64, state)
        out = normalized_weight(w, state, training=False)
        assert np.abs(out.data - w64).max() < 1e-4

    def test_zero_weight_returned_unchanged_with_warning(self, rng, caplog):
        w = Tensor(np.zeros((3, 3), dtype=np.float32), requires_grad=True)
        state = SpectralNormState(w.data, rng)
        with caplog.at_level(logging.WARNING, logger="deskgan.spectral"):
            out = normalized_weight(w, state, training=True)
        assert out is w
        assert any("degenerate" in r.message for r in caplog.records)

    def test_normalized_spectral_norm_in_band_after_warmup(self, rng):
        for _ in range(5):
            w64 = random_gapped_matrix(rng, 10, 7, gap=1.3) * rng.uniform(0.5, 8)
            w = Tensor(w64)
            state = SpectralNormState(w64, rng)
            for _ in range(50):
                power_iteration_step(w64, state)
            out = normalized_weight(w, state, training=False)
            sig = svd_sigma(out.data)
            assert 0.9 <= sig <= 1.01

    def test_scale_equivariance(self, rng):
        w64 = rng.standard_normal((5, 6))
        for c in (0.1, 3.0, 250.0):
            state_a = SpectralNormState(w64, np.random.default_rng(42))
            state_b = SpectralNormState(c * w64, np.random.default_rng(42))
            for _ in range(40):
                power_iteration_step(w64, state_a)
                power_iteration_step(c * w64, state_b)
            out_a = normalized_weight(Tensor(w64), state_a, training=False)
            out_b = normalized_weight(Tensor(c * w64), state_b, training=False)
            assert np.abs(out_a.data - out_b.data).max() < 1e-6

    def test_gradient_flows_through_division(self, rng):
        w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        state = SpectralNormState(w.data, rng)
        for _ in range(30):
            power_iteration_step(w.data, state)

        def loss():
            wn = normalized_weight(w, state, training=False)
            return T.tsum(T.tanh(wn) * T.tanh(wn))

        # u, v frozen: the checked function divides by sigma(w) = uᵀWv
        assert_grads_match(loss, [w])

    def test_training_mode_advances_iteration(self, rng):
        w = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
        state = SpectralNormState(w.data, rng)
        u_before = state.u.copy()
        normalized_weight(w, state, training=True)
        assert not np.array_equal(state.u, u_before)
        u_now = state.u.copy()
        normalized_weight(w, state, training=False)
        assert np.array_equal(state.u, u_now)
