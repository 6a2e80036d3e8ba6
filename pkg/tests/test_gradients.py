"""Finite-difference checks for every differentiable op (64-bit)."""

import numpy as np
import pytest

from helpers import gradcheck
from mscanet.engine import (
    BatchNormState,
    ConvParams,
    Tape,
    Tensor,
    add,
    batchnorm2d,
    bilinear_upsample,
    clamp,
    concat_channels,
    conv2d,
    elementwise_mul,
    global_avg_pool,
    log,
    maxpool2,
    relu,
    sigmoid,
    sub,
    tmean,
    tsum,
)

TOL = 1e-4


def t64(rng, shape, requires_grad=True):
    return Tensor(rng.random(shape), requires_grad=requires_grad)


class TestConvBackward:
    def test_zero_upstream_gives_zero_grads(self, rng):
        x = t64(rng, (1, 2, 4, 4))
        params = ConvParams(t64(rng, (3, 2, 3, 3)), t64(rng, (3,)))
        with Tape() as tape:
            out = conv2d(x, params)
            loss = tsum(elementwise_mul(out, 0.0))
        tape.backward(loss)
        assert np.all(x.grad == 0)
        assert np.all(params.weight.grad == 0)
        assert np.all(params.bias.grad == 0)

    def test_weight_grad_matches_fd(self, rng):
        x = Tensor(rng.random((1, 1, 4, 4)))
        params = ConvParams(t64(rng, (1, 1, 3, 3)), t64(rng, (1,)))
        err = gradcheck(lambda: tsum(conv2d(x, params)),
                        [params.weight, params.bias])
        assert err < TOL

    def test_dilated_input_grad_matches_fd(self, rng):
        x = t64(rng, (1, 2, 6, 6))
        params = ConvParams(t64(rng, (2, 2, 3, 3)), t64(rng, (2,)), dilation=2)
        # square the output so the input gradient is input-dependent
        err = gradcheck(lambda: tsum(elementwise_mul(conv2d(x, params), conv2d(x, params))),
                        [x])
        assert err < TOL

    def test_all_conv_grads_random_shape(self, rng):
        x = t64(rng, (2, 3, 5, 5))
        params = ConvParams(t64(rng, (2, 3, 3, 3)), t64(rng, (2,)))

        def loss():
            y = conv2d(x, params)
            return tsum(elementwise_mul(y, y))

        assert gradcheck(loss, [x, params.weight, params.bias]) < TOL

    @pytest.mark.parametrize("d", [2, 4])
    def test_dilation_variants(self, rng, d):
        x = t64(rng, (1, 1, 9, 9))
        params = ConvParams(t64(rng, (1, 1, 3, 3)), t64(rng, (1,)), dilation=d)

        def loss():
            y = conv2d(x, params)
            return tsum(elementwise_mul(y, y))

        assert gradcheck(loss, [x, params.weight, params.bias]) < TOL


class TestBatchNormBackward:
    def test_train_mode_grads(self, rng):
        x = t64(rng, (2, 2, 3, 3))
        gamma = Tensor(1.0 + rng.random(2), requires_grad=True)
        beta = t64(rng, (2,))
        state = BatchNormState(2, dtype=np.float64)

        def loss():
            y = batchnorm2d(x, gamma, beta, state, training=True)
            return tsum(elementwise_mul(y, y))

        assert gradcheck(loss, [x, gamma, beta]) < TOL

    def test_eval_mode_grads(self, rng):
        x = t64(rng, (1, 2, 3, 3))
        gamma = Tensor(1.0 + rng.random(2), requires_grad=True)
        beta = t64(rng, (2,))
        state = BatchNormState(2, dtype=np.float64)
        state.running_mean[:] = rng.random(2)
        state.running_var[:] = 0.5 + rng.random(2)

        def loss():
            y = batchnorm2d(x, gamma, beta, state, training=False)
            return tsum(elementwise_mul(y, y))

        assert gradcheck(loss, [x, gamma, beta]) < TOL


class TestActivationBackward:
    def test_sigmoid_grad_at_zero_is_quarter(self):
        x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        with Tape() as tape:
            loss = tsum(sigmoid(x))
        tape.backward(loss)
        assert abs(x.grad[0, 0, 0, 0] - 0.25) < 1e-12
        assert gradcheck(lambda: tsum(sigmoid(x)), [x]) < TOL

    def test_sigmoid_fd(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        assert gradcheck(lambda: tsum(elementwise_mul(sigmoid(x), sigmoid(x))), [x]) < TOL

    def test_relu_fd(self, rng):
        # keep values away from the kink at 0
        x = Tensor(rng.random((1, 2, 4, 4)) + 0.5, requires_grad=True)
        x.data[0, 0, :2] *= -1.0
        assert gradcheck(lambda: tsum(elementwise_mul(relu(x), relu(x))), [x]) < TOL


class TestLinearOpsBackward:
    def test_upsample_adjoint_fd(self, rng):
        x = t64(rng, (1, 2, 3, 4))

        def loss():
            y = bilinear_upsample(x, 2)
            return tsum(elementwise_mul(y, y))

        assert gradcheck(loss, [x]) < TOL

    def test_upsample_backward_is_transpose(self, rng):
        # For a linear map y = Ax, backward of upstream g must be A^T g.
        x = Tensor(rng.random((1, 1, 3, 3)), requires_grad=True)
        g = rng.random((1, 1, 6, 6))
        basis = np.zeros((9, 36))
        for i in range(9):
            e = np.zeros(9)
            e[i] = 1.0
            out = bilinear_upsample(Tensor(e.reshape(1, 1, 3, 3)), 2)
            basis[i] = out.data.reshape(-1)
        with Tape() as tape:
            y = bilinear_upsample(x, 2)
            loss = tsum(elementwise_mul(y, Tensor(g)))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad.reshape(-1), basis @ g.reshape(-1), atol=1e-12)

    def test_gap_fd(self, rng):
        x = t64(rng, (2, 2, 3, 3))

        def loss():
            y = global_avg_pool(x)
            return tsum(elementwise_mul(y, y))

        assert gradcheck(loss, [x]) < TOL

    def test_maxpool_routes_to_argmax(self, rng):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
        with Tape() as tape:
            loss = tsum(maxpool2(x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[[[0, 0], [0, 1.0]]]])

    def test_maxpool_fd(self, rng):
        x = t64(rng, (1, 2, 4, 4))

        def loss():
            y = maxpool2(x)
            return tsum(elementwise_mul(y, y))

        assert gradcheck(loss, [x]) < TOL

    def test_concat_fd(self, rng):
        a = t64(rng, (1, 2, 3, 3))
        b = t64(rng, (1, 1, 3, 3))

        def loss():
            y = concat_channels([a, b])
            return tsum(elementwise_mul(y, y))

        assert gradcheck(loss, [a, b]) < TOL

    def test_mul_broadcast_fd(self, rng):
        x = t64(rng, (1, 3, 3, 3))
        m = t64(rng, (1, 1, 3, 3))
        assert gradcheck(lambda: tsum(elementwise_mul(x, m)), [x, m]) < TOL

    def test_add_sub_fd(self, rng):
        a = t64(rng, (1, 2, 2, 2))
        b = t64(rng, (1, 2, 2, 2))

        def loss():
            y = elementwise_mul(sub(add(a, b), elementwise_mul(b, 0.5)), a)
            return tsum(y)

        assert gradcheck(loss, [a, b]) < TOL

    def test_log_clamp_mean_fd(self, rng):
        x = Tensor(0.2 + 0.6 * rng.random((1, 1, 3, 3)), requires_grad=True)
        assert gradcheck(lambda: tmean(log(clamp(x, 1e-7, 1 - 1e-7))), [x]) < TOL


class TestRandomizedOpSweep:
    """Seeded randomized shapes through a mixed graph, checked end to end."""

    @pytest.mark.parametrize("seed", range(5))
    def test_mixed_graph(self, seed):
        r = np.random.default_rng(1000 + seed)
        n, c = int(r.integers(1, 3)), int(r.integers(1, 4))
        h = int(r.integers(2, 5)) * 2
        x = Tensor(r.random((n, c, h, h)), requires_grad=True)
        params = ConvParams(
            Tensor(0.3 * r.standard_normal((2, c, 3, 3)), requires_grad=True),
            Tensor(r.random(2), requires_grad=True),
            dilation=int(r.choice([1, 2])),
        )
        gamma = Tensor(1.0 + 0.1 * r.random(2), requires_grad=True)
        beta = Tensor(0.1 * r.random(2), requires_grad=True)
        state = BatchNormState(2, dtype=np.float64)

        def loss():
            y = conv2d(x, params)
            y = batchnorm2d(y, gamma, beta, state, training=True)
            y = relu(y)
            y = maxpool2(y)
            y = bilinear_upsample(y, 2)
            y = sigmoid(global_avg_pool(y))
            return tmean(elementwise_mul(y, y))

        err = gradcheck(loss, [x, params.weight, params.bias, gamma, beta])
        assert err < TOL, f"seed {seed}: rel err {err}"
