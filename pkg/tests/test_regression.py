"""Regression filter objective, gradients, SGD, and the training loops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convtrack.config import desk_defaults
from convtrack.densemap import DenseMap, ShapeError, gaussian_label, xcorr2d_valid
from convtrack.features import ConvStack, default_stack
from convtrack.geometry import response_geometry
from convtrack.gradcheck import finite_diff, rel_error
from convtrack.regression import (
    FilterBank,
    SgdState,
    TrainSample,
    TrainingDiverged,
    grad_filters,
    init_filters,
    loss,
    offline_train,
    sgd_step,
    train_first_frame,
    update_one_step,
)


def rand_sample(rng, c=2, xh=6, xw=6, fh=3, fw=3):
    x = DenseMap(rng.normal(size=(c, xh, xw)))
    y = DenseMap(rng.normal(size=(1, xh - fh + 1, xw - fw + 1)))
    f = FilterBank(DenseMap(rng.normal(size=(c, fh, fw)) * 0.3))
    return TrainSample(x, y), f


class TestLoss:
    def test_zero_filter_zero_label(self):
        x = DenseMap(np.ones((1, 4, 4)))
        y = DenseMap(np.zeros((1, 2, 2)))
        f = FilterBank(DenseMap(np.zeros((1, 3, 3))))
        assert loss(TrainSample(x, y), f, 0.5) == 0.0

    def test_single_unit_residual(self):
        # R - y = [[1, 0]] with lambda 0 gives L = 1
        x = DenseMap(np.array([[1.0, 0.0]]))
        y = DenseMap(np.zeros((1, 1, 2)))
        f = FilterBank(DenseMap(np.array([[1.0]])))
        assert loss(TrainSample(x, y), f, 0.0) == pytest.approx(1.0)

    def test_hand_evaluated_with_regularizer(self):
        x = DenseMap(np.array([[1.0]]))
        y = DenseMap(np.array([[0.0]]))
        f = FilterBank(DenseMap(np.array([[2.0]])))
        # residual^2 = 4, reg = 0.5 * 4 = 2
        assert loss(TrainSample(x, y), f, 0.5) == pytest.approx(6.0)

    def test_label_shape_enforced(self):
        x = DenseMap(np.ones((1, 4, 4)))
        y = DenseMap(np.zeros((1, 3, 3)))
        f = FilterBank(DenseMap(np.zeros((1, 3, 3))))
        with pytest.raises(ShapeError):
            loss(TrainSample(x, y), f, 0.0)


class TestGradFilters:
    def test_zero_residual_zero_lambda(self):
        # filter reproduces the label exactly: x identity under 1x1 filter
        x = DenseMap(np.array([[1.0, 2.0], [3.0, 4.0]]))
        f = FilterBank(DenseMap(np.array([[1.0]])))
        y = DenseMap(x.data.copy())
        df, dx = grad_filters(TrainSample(x, y), f, 0.0)
        assert np.all(df == 0) and np.all(dx == 0)

    def test_pure_regularizer(self):
        x = DenseMap(np.array([[1.0, 2.0], [3.0, 4.0]]))
        f = FilterBank(DenseMap(np.array([[1.0]])))
        y = DenseMap(x.data.copy())
        df, _ = grad_filters(TrainSample(x, y), f, 0.25)
        np.testing.assert_allclose(df, 2.0 * 0.25 * f.f.data)

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        sample, f = rand_sample(rng)
        lam = float(rng.uniform(0.0, 0.1))
        xd = sample.x.data
        fd = f.f.data

        def value():
            return loss(
                TrainSample(DenseMap(xd), sample.y), FilterBank(DenseMap(fd)), lam
            )

        df, dx = grad_filters(sample, f, lam)
        assert rel_error(df, finite_diff(value, fd)) < 1e-6
        assert rel_error(dx, finite_diff(value, xd)) < 1e-6


class TestSgdStep:
    def test_fixed_point(self):
        p = np.array([1.0, 2.0])
        state = SgdState(np.zeros(2), momentum=0.9, learning_rate=0.1)
        np.testing.assert_array_equal(sgd_step(p, np.zeros(2), state), p)

    def test_plain_gradient_step(self):
        p = np.array([1.0])
        g = np.array([0.3])
        state = SgdState(np.zeros(1), momentum=0.0, learning_rate=1.0)
        np.testing.assert_allclose(sgd_step(p, g, state), [0.7])

    def test_two_step_momentum_displacement(self):
        # v1 = -g, v2 = -0.9 g - g; total displacement -2.9 g
        g = np.array([1.0])
        p = np.array([0.0])
        state = SgdState(np.zeros(1), momentum=0.9, learning_rate=1.0)
        p = sgd_step(p, g, state)
        p = sgd_step(p, g, state)
        np.testing.assert_allclose(p, [-2.9])

    def test_weight_decay_equivalence(self):
        # with momentum 0, the lambda-inclusive gradient is classical decay:
        # p <- (1 - 2 lr lam) p - lr grad_data
        rng = np.random.default_rng(0)
        sample, f = rand_sample(rng)
        lam, lr = 0.05, 0.01
        df_data, _ = grad_filters(sample, f, 0.0)
        df_full, _ = grad_filters(sample, f, lam)
        state = SgdState(np.zeros_like(f.f.data), momentum=0.0, learning_rate=lr)
        stepped = sgd_step(f.f.data, df_full, state)
        expect = (1.0 - 2.0 * lr * lam) * f.f.data - lr * df_data
        np.testing.assert_allclose(stepped, expect, atol=1e-12)

    def test_shape_mismatch(self):
        state = SgdState(np.zeros(2), momentum=0.0, learning_rate=1.0)
        with pytest.raises(ShapeError):
            sgd_step(np.zeros(3), np.zeros(3), state)


class TestTrainFirstFrame:
    def test_zero_label_zero_init(self):
        cfg = desk_defaults().replace(filter_init_std=0.0)
        feat = DenseMap(np.random.default_rng(0).normal(size=(2, 6, 6)))
        label = DenseMap(np.zeros((1, 3, 3)))
        fb = train_first_frame(feat, label, cfg, np.random.default_rng(1), steps=5)
        assert np.all(fb.f.data == 0)

    def test_loss_never_rises(self):
        cfg = desk_defaults()
        rng = np.random.default_rng(2)
        feat = DenseMap(rng.normal(size=(4, 8, 8)))
        label = gaussian_label(4, 4, (1.5, 1.5), (0.8, 0.8))
        fb = train_first_frame(feat, label, cfg, np.random.default_rng(3))
        init = init_filters(fb.shape, cfg.filter_init_std, np.random.default_rng(3))
        sample = TrainSample(feat, label)
        assert loss(sample, fb, cfg.lambda_first_frame) <= loss(
            sample, init, cfg.lambda_first_frame
        )

    def test_argmax_lands_on_label_peak(self):
        # bright centered square on dark background, centered Gaussian label
        cfg = desk_defaults()
        feat = np.zeros((1, 11, 11))
        feat[0, 4:7, 4:7] = 1.0
        label = gaussian_label(5, 5, (2.0, 2.0), (0.8, 0.8))
        fb = train_first_frame(DenseMap(feat), label, cfg, np.random.default_rng(4))
        resp = xcorr2d_valid(DenseMap(feat), fb.f).data[0]
        peak = np.unravel_index(np.argmax(resp), resp.shape)
        assert peak == (2, 2)

    def test_shape_invariance(self):
        cfg = desk_defaults()
        rng = np.random.default_rng(5)
        feat = DenseMap(rng.normal(size=(3, 7, 7)))
        label = gaussian_label(3, 3, (1.0, 1.0), (0.8, 0.8))
        fb = train_first_frame(feat, label, cfg, rng, steps=3)
        assert fb.shape == (3, 5, 5)


class TestUpdateOneStep:
    def test_zero_gradient_no_change(self):
        x = DenseMap(np.array([[1.0, 2.0], [3.0, 4.0]]))
        fb = FilterBank(DenseMap(np.array([[1.0]])))
        y = DenseMap(x.data.copy())
        cfg = desk_defaults().replace(lambda_update=1e-9)
        out = update_one_step(x, y, fb, cfg)
        np.testing.assert_allclose(out.f.data, fb.f.data, atol=1e-9)

    @given(seed=st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_one_step_reduces_loss(self, seed):
        rng = np.random.default_rng(seed)
        sample, fb = rand_sample(rng)
        cfg = desk_defaults().replace(lr_update=1e-4, lambda_update=0.005)
        out = update_one_step(sample.x, sample.y, fb, cfg)
        assert loss(sample, out, cfg.lambda_update) <= loss(
            sample, fb, cfg.lambda_update
        )

    def test_repeated_update_monotone(self):
        rng = np.random.default_rng(6)
        sample, fb = rand_sample(rng)
        cfg = desk_defaults()
        once = update_one_step(sample.x, sample.y, fb, cfg)
        twice = update_one_step(sample.x, sample.y, once, cfg)
        l1 = loss(sample, once, cfg.lambda_update)
        l2 = loss(sample, twice, cfg.lambda_update)
        assert l2 <= l1


class TestTinyInstanceConvergence:
    def test_residual_driven_below_1e3_of_initial(self):
        # filter the same size as the sample, so R is 1x1; lambda = 0
        rng = np.random.default_rng(7)
        x = DenseMap(rng.normal(size=(1, 3, 3)))
        y = DenseMap(np.array([[0.7]]))
        f = FilterBank(DenseMap(rng.normal(size=(1, 3, 3)) * 0.01))
        sample = TrainSample(x, y)
        initial = abs(float(xcorr2d_valid(x, f.f).data.item()) - 0.7)
        state = SgdState(np.zeros_like(f.f.data), momentum=0.9, learning_rate=1e-2)
        fd = f.f.data
        for _ in range(200):
            df, _ = grad_filters(sample, FilterBank(DenseMap(fd)), 0.0)
            fd = sgd_step(fd, df, state)
        final = abs(float(xcorr2d_valid(x, DenseMap(fd)).data.item()) - 0.7)
        assert final < 1e-3 * initial


class TestOfflineTrain:
    @staticmethod
    def tiny_corpus(rng, n=3):
        corpus = []
        for _ in range(n):
            img = rng.uniform(size=(1, 72, 72))
            img[0, 26:46, 26:46] += 0.5
            corpus.append((DenseMap(np.clip(img, 0, 1)), (26.0, 26.0, 20.0, 20.0)))
        return corpus

    def test_zero_learning_rate_is_noop(self):
        cfg = desk_defaults().replace(lr_offline=1e-300, translation_jitter=1e-9)
        rng = np.random.default_rng(8)
        stack = default_stack(rng)
        geom = response_geometry(cfg, stack)
        fb = init_filters((geom.channels, *geom.filter_hw), 0.01, rng)
        corpus = self.tiny_corpus(rng)
        before_f = fb.f.data.copy()
        before_w = [l.weights.copy() for l in stack.layers]
        stack2, fb2, _ = offline_train(corpus, stack, fb, cfg, geom, rng, epochs=2)
        np.testing.assert_allclose(fb2.f.data, before_f, atol=1e-290)
        for w0, l2 in zip(before_w, stack2.layers):
            np.testing.assert_allclose(l2.weights, w0, atol=1e-290)

    def test_loss_decreases_on_repeated_corpus(self):
        cfg = desk_defaults().replace(translation_jitter=1e-6, scale_jitter=1e-6)
        rng = np.random.default_rng(9)
        stack = default_stack(rng)
        geom = response_geometry(cfg, stack)
        fb = init_filters((geom.channels, *geom.filter_hw), 0.01, rng)
        corpus = self.tiny_corpus(rng, n=1) * 4
        _, _, losses = offline_train(corpus, stack, fb, cfg, geom, rng, epochs=8)
        assert losses[-1] < losses[0]

    def test_empty_corpus_rejected(self):
        cfg = desk_defaults()
        rng = np.random.default_rng(10)
        stack = default_stack(rng)
        geom = response_geometry(cfg, stack)
        fb = init_filters((geom.channels, *geom.filter_hw), 0.01, rng)
        with pytest.raises(ValueError):
            offline_train([], stack, fb, cfg, geom, rng)

    def test_divergence_reported_with_context(self):
        cfg = desk_defaults().replace(lr_offline=1e6)
        rng = np.random.default_rng(11)
        stack = default_stack(rng)
        geom = response_geometry(cfg, stack)
        fb = init_filters((geom.channels, *geom.filter_hw), 0.01, rng)
        corpus = self.tiny_corpus(rng)
        with pytest.raises(TrainingDiverged):
            offline_train(corpus, stack, fb, cfg, geom, rng, epochs=3)

    def test_shapes_invariant(self):
        cfg = desk_defaults()
        rng = np.random.default_rng(12)
        stack = default_stack(rng)
        geom = response_geometry(cfg, stack)
        fb = init_filters((geom.channels, *geom.filter_hw), 0.01, rng)
        corpus = self.tiny_corpus(rng)
        stack2, fb2, _ = offline_train(corpus, stack, fb, cfg, geom, rng, epochs=1)
        assert fb2.shape == fb.shape
        for a, b in zip(stack.layers, stack2.layers):
            assert a.weights.shape == b.weights.shape
