"""Gradient correctness: analytic backward vs finite differences, plus
Adam and the freeze contract."""

import numpy as np
import pytest

from boxprompt.backend import (
    Adam,
    BatchNorm2d,
    Conv2d,
    NonFiniteGradient,
    Parameter,
    RunningStats,
    Tape,
    Tensor,
    add,
    batchnorm2d,
    check_input_gradients,
    check_parameter_gradients,
    concat_channels,
    conv2d,
    linear1x1,
    mul_const,
    relu,
    subsample2x,
    sum_all,
    upsample2x,
)

RTOL = 1e-5
EPS = 1e-4


def f64_param(rng, shape, scale=1.0, trainable=True):
    return Parameter(Tensor(rng.normal(0, scale, shape)), trainable=trainable)


class TestPrimitiveGradients:
    def test_conv2d_weight_and_bias(self):
        rng = np.random.default_rng(10)
        for _ in range(8):
            n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
            k = int(rng.choice([1, 3]))
            s = int(rng.choice([1, 2]))
            # (h + 2*(k//2) - k) must divide by the stride exactly
            h = int(rng.choice([5, 7])) if s == 2 else int(rng.choice([4, 6]))
            x = Tensor(rng.normal(0, 1, (n, ci, h, h)))
            w = f64_param(rng, (co, ci, k, k))
            b = f64_param(rng, (co,))

            err = check_parameter_gradients(
                lambda: sum_all(conv2d(x, w, b, stride=s, padding=k // 2)),
                [w, b], rng, coords_per_param=4, eps=EPS,
            )
            assert err < RTOL

    def test_conv2d_input(self):
        rng = np.random.default_rng(11)
        w = f64_param(rng, (2, 3, 3, 3))
        b = f64_param(rng, (2,))
        err = check_input_gradients(
            lambda x: sum_all(mul_const(conv2d(x, w, b, stride=1, padding=1), 0.5)),
            rng.normal(0, 1, (2, 3, 5, 5)), rng, n_coords=8, eps=EPS,
        )
        assert err < RTOL

    def test_batchnorm_train_mode(self):
        rng = np.random.default_rng(12)
        for _ in range(4):
            c = int(rng.integers(1, 4))
            x = Tensor(rng.normal(0, 2, (3, c, 4, 4)))
            g = f64_param(rng, (c,), scale=0.5)
            g.assign(g.value.data + 1.0)
            beta = f64_param(rng, (c,))
            stats = RunningStats(c, dtype=np.float64)
            # square inside the sum so the check exercises dvar/dmean paths
            err = check_parameter_gradients(
                lambda: sum_all(relu(batchnorm2d(x, g, beta, stats, train=True))),
                [g, beta], rng, coords_per_param=3, eps=EPS,
            )
            assert err < RTOL

    def test_batchnorm_input_gradient(self):
        rng = np.random.default_rng(13)
        c = 2
        g = f64_param(rng, (c,), scale=0.2)
        g.assign(np.abs(g.value.data) + 1.0)
        beta = f64_param(rng, (c,))

        def forward(x):
            stats = RunningStats(c, dtype=np.float64)
            return sum_all(relu(batchnorm2d(x, g, beta, stats, train=True)))

        err = check_input_gradients(forward, rng.normal(0, 1, (2, c, 3, 3)), rng, n_coords=8, eps=EPS)
        assert err < RTOL

    def test_linear1x1(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(0, 1, (2, 3, 4, 4)))
        w = f64_param(rng, (5, 3))
        b = f64_param(rng, (5,))
        err = check_parameter_gradients(
            lambda: sum_all(relu(linear1x1(x, w, b))), [w, b], rng, coords_per_param=5, eps=EPS
        )
        assert err < RTOL

    def test_resampling_and_concat(self):
        rng = np.random.default_rng(15)
        w = f64_param(rng, (2, 4, 3, 3))

        def forward(x):
            up = upsample2x(x)
            down = subsample2x(up)
            both = concat_channels([down, x])
            return sum_all(relu(conv2d(both, w, None, padding=1)))

        err = check_input_gradients(forward, rng.normal(0, 1, (1, 2, 4, 4)), rng, n_coords=8, eps=EPS)
        assert err < RTOL

    def test_add_and_scale(self):
        rng = np.random.default_rng(16)

        def forward(x):
            return mul_const(add(sum_all(x), mul_const(sum_all(x), 2.0)), 0.25)

        err = check_input_gradients(forward, rng.normal(0, 1, (3, 3)), rng, n_coords=4, eps=EPS)
        assert err < RTOL


class TestFreezeContract:
    def test_frozen_param_gets_no_gradient(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.normal(0, 1, (1, 2, 4, 4)).astype(np.float32))
        w = Parameter(Tensor(rng.normal(0, 1, (2, 2, 3, 3)).astype(np.float32)), trainable=False)
        with Tape() as tape:
            loss = sum_all(conv2d(x, w, None, padding=1))
        tape.backward(loss)
        np.testing.assert_array_equal(w.gradient.data, 0.0)

    def test_frozen_param_untouched_by_adam(self):
        p = Parameter(Tensor(np.ones(4, np.float32)), trainable=False)
        before = p.value.data.copy()
        # simulate a stray gradient write; step must still skip it
        p.gradient = Tensor(np.full(4, 5.0, np.float32))
        opt = Adam([p], lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.value.data, before)


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = Parameter(Tensor(np.array([1.5, -2.0], np.float32)))
        opt = Adam([p], lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.value.data, [1.5, -2.0])

    def test_first_step_magnitude(self):
        # constant gradient 1.0: bias-corrected first step is lr/(1+eps)
        p = Parameter(Tensor(np.array([0.0], np.float32)))
        p.gradient = Tensor(np.array([1.0], np.float32))
        opt = Adam([p], lr=0.1)
        opt.step()
        assert p.value.data[0] == pytest.approx(-0.1, rel=1e-6)

    def test_scalar_recurrence_oracle(self):
        # hand-rolled Adam recurrence over several steps with varying grads
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        grads = [1.0, -0.5, 0.25, 2.0]
        theta, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

        p = Parameter(Tensor(np.array([0.3], np.float32)))
        opt = Adam([p], lr=lr, betas=(b1, b2), eps=eps)
        for g in grads:
            p.gradient = Tensor(np.array([g], np.float32))
            opt.step()
        assert p.value.data[0] == pytest.approx(theta, rel=1e-5)

    def test_nan_gradient_aborts(self):
        p = Parameter(Tensor(np.zeros(2, np.float32)), name="w")
        p.gradient = Tensor._wrap(np.array([np.nan, 0.0], np.float32))
        opt = Adam([p], lr=0.1)
        with pytest.raises(NonFiniteGradient, match="w"):
            opt.step()


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.normal(0, 1, (2, 3, 8, 8)).astype(np.float32))
            conv = Conv2d(3, 4, 3, padding=1, rng=np.random.default_rng(5))
            bn = BatchNorm2d(4)
            return relu(bn(conv(x), train=True)).data

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()
