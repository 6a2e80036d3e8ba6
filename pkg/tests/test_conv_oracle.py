"""Fast conv path against the seven-loop sliding-window oracle."""

import numpy as np
import pytest

from helpers import conv2d_naive
from mscanet.engine import ConvParams, Tensor, conv2d


def random_case(r):
    n = int(r.integers(1, 3))
    c_in = int(r.integers(1, 4))
    c_out = int(r.integers(1, 4))
    k = int(r.choice([1, 3, 5]))
    d = int(r.choice([1, 2, 4, 6]))
    span = (k - 1) * d + 1
    h = int(r.integers(2, 8)) + (0 if k == 1 else span // 2)
    w = int(r.integers(2, 8)) + (0 if k == 1 else span // 2)
    x = r.standard_normal((n, c_in, h, w))
    wt = r.standard_normal((c_out, c_in, k, k))
    b = r.standard_normal(c_out)
    return x, wt, b, d


def run_case(x, wt, b, d):
    params = ConvParams(Tensor(wt), Tensor(b), dilation=d)
    fast = conv2d(Tensor(x), params).data
    slow = conv2d_naive(x, wt, b, dilation=d)
    np.testing.assert_allclose(fast, slow, atol=1e-6, rtol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_randomized_against_oracle(seed):
    r = np.random.default_rng(7000 + seed)
    run_case(*random_case(r))


@pytest.mark.parametrize("d", [1, 2, 4, 6])
def test_each_dilation_once(d):
    r = np.random.default_rng(42 + d)
    span = 2 * d + 1
    x = r.standard_normal((1, 2, span + 3, span + 2))
    wt = r.standard_normal((3, 2, 3, 3))
    b = r.standard_normal(3)
    run_case(x, wt, b, d)


def test_stride_two_against_oracle():
    r = np.random.default_rng(99)
    x = r.standard_normal((1, 2, 9, 9))
    wt = r.standard_normal((2, 2, 3, 3))
    b = r.standard_normal(2)
    params = ConvParams(Tensor(wt), Tensor(b), stride=2)
    fast = conv2d(Tensor(x), params).data
    slow = conv2d_naive(x, wt, b, stride=2)
    np.testing.assert_allclose(fast, slow, atol=1e-6, rtol=1e-6)
