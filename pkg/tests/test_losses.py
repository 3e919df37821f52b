import numpy as np
import pytest

from deskgan import tensor as T
from deskgan.tensor import Tensor
from deskgan.losses import (hinge_d_loss, hinge_g_loss, Adam, TTURConfig,
                            NonFiniteGradient)

from gradcheck import assert_grads_match


class TestHingeDLoss:
    def test_satisfied_margins_give_zero(self):
        loss = hinge_d_loss(Tensor(np.array([1.0, 2.0])), Tensor(np.array([-1.0, -3.0])))
        assert loss.item() == 0.0

    def test_zero_scores_give_two(self):
        loss = hinge_d_loss(Tensor(np.zeros(4)), Tensor(np.zeros(4)))
        assert abs(loss.item() - 2.0) < 1e-12

    def test_subgradient_pattern(self):
        d_real = Tensor(np.array([2.0, 0.5]), requires_grad=True)
        d_fake = Tensor(np.array([-2.0, 0.0]), requires_grad=True)
        hinge_d_loss(d_real, d_fake).backward()
        b = 2
        # per-sample (pre-mean): 0 where real score > 1, -1 where < 1
        assert np.allclose(d_real.grad * b, [0.0, -1.0])
        assert np.allclose(d_fake.grad * b, [0.0, 1.0])

    def test_nonnegative_and_zero_iff_margins(self, rng):
        for _ in range(50):
            d_real = rng.standard_normal(6) * 2
            d_fake = rng.standard_normal(6) * 2
            val = hinge_d_loss(Tensor(d_real), Tensor(d_fake)).item()
            assert val >= 0.0
            if (d_real >= 1).all() and (d_fake <= -1).all():
                assert val == 0.0
            else:
                assert val > 0.0

    def test_gradients_through_full_pass(self, rng):
        d_real = Tensor(rng.standard_normal(5), requires_grad=True)
        d_fake = Tensor(rng.standard_normal(5), requires_grad=True)
        assert_grads_match(lambda: hinge_d_loss(d_real, d_fake), [d_real, d_fake])


class TestHingeGLoss:
    def test_negated_mean(self):
        assert abs(hinge_g_loss(Tensor(np.full(7, 0.3))).item() + 0.3) < 1e-7

    def test_gradient_minus_one_over_batch(self):
        d_fake = Tensor(np.array([0.1, -0.4, 2.0, 0.0]), requires_grad=True)
        hinge_g_loss(d_fake).backward()
        assert np.allclose(d_fake.grad, -0.25)

    def test_linearity_under_constant_shift(self, rng):
        d = rng.standard_normal(5)
        base = hinge_g_loss(Tensor(d)).item()
        shifted = hinge_g_loss(Tensor(d + 1.7)).item()
        assert abs(shifted - (base - 1.7)) < 1e-6


class TestAdam:
    def test_first_step_closed_form(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([0.5])
        opt = Adam([("p", p)], lr=1e-4, beta1=0.0, beta2=0.9)
        opt.step()
        assert abs(opt.v["p"][0] - 0.025) < 1e-12
        delta = 1e-4 * 0.5 / (np.sqrt(0.25) + 1e-8)
        assert abs((1.0 - p.data[0]) - delta) < 1e-12

    def test_zero_gradient_leaves_params(self, rng):
        p = Tensor(rng.standard_normal(4), requires_grad=True)
        before = p.data.copy()
        p.grad = np.zeros(4)
        Adam([("p", p)], lr=1e-3).step()
        assert np.array_equal(p.data, before)

    def test_ttur_groups_move_in_lr_ratio(self):
        g = Tensor(np.zeros(3), requires_grad=True)
        d = Tensor(np.zeros(3), requires_grad=True)
        g.grad = np.full(3, 0.7)
        d.grad = np.full(3, 0.7)
        cfg = TTURConfig()
        Adam([("g", g)], lr=cfg.lr_g).step()
        Adam([("d", d)], lr=cfg.lr_d).step()
        ratio = d.data / g.data
        assert np.abs(ratio - 4.0).max() < 1e-9

    def test_first_step_magnitude_bounded_by_lr(self, rng):
        for _ in range(20):
            p = Tensor(rng.standard_normal(6), requires_grad=True)
            before = p.data.copy()
            p.grad = rng.standard_normal(6) * rng.uniform(0.01, 100)
            Adam([("p", p)], lr=1e-3).step()
            assert np.abs(p.data - before).max() <= 1e-3 * (1 + 1e-6)

    def test_nonfinite_gradient_aborts_naming_parameter(self, rng):
        a = Tensor(rng.standard_normal(3), requires_grad=True)
        b = Tensor(rng.standard_normal(3), requires_grad=True)
        a.grad = np.ones(3)
        b.grad = np.array([1.0, np.nan, 0.0])
        opt = Adam([("alpha", a), ("beta.weight", b)], lr=1e-3)
        before = a.data.copy()
        with pytest.raises(NonFiniteGradient, match="beta.weight"):
            opt.step()
        assert np.array_equal(a.data, before)  # no partial update
        assert opt.t == 0

    def test_bias_correction_with_nonzero_beta1(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([1.0])
        opt = Adam([("p", p)], lr=0.1, beta1=0.9, beta2=0.999)
        opt.step()
        # m̂ = g, v̂ = g² after correction at t=1 -> step ≈ lr
        assert abs(-p.data[0] - 0.1 / (1 + 1e-8)) < 1e-9

    def test_state_roundtrip(self, rng):
        p = Tensor(rng.standard_normal(4), requires_grad=True)
        opt = Adam([("p", p)], lr=1e-3)
        p.grad = rng.standard_normal(4)
        opt.step()
        arrays = {k: v.copy() for k, v in opt.state_arrays("o/").items()}
        opt2 = Adam([("p", p)], lr=1e-3)
        opt2.load_state_arrays("o/", arrays)
        assert opt2.t == opt.t
        assert np.array_equal(opt2.m["p"], opt.m["p"])
        assert np.array_equal(opt2.v["p"], opt.v["p"])


class TestTTURConfig:
    def test_paper_defaults(self):
        cfg = TTURConfig()
        assert cfg.lr_g == 0.0001 and cfg.lr_d == 0.0004 and cfg.d_steps_per_g_step == 1

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            TTURConfig(lr_g=0.0)
        with pytest.raises(ValueError):
            TTURConfig(d_steps_per_g_step=0)
