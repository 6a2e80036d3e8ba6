"""Differentiable operations on NCHW tensors.

Every function here is pure given its inputs: it computes the forward
value with numpy and, when a tape is active, records a closure that
routes the upstream gradient back to the inputs.  Convolution uses an
im2col + GEMM fast path; the naive sliding-window reference lives in the
test suite, not here, so the two can disagree honestly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor, record_op


@dataclass
class ConvParams:
    """Weights of one 2-D convolution with "same" padding at stride 1.

    The effective kernel extent is k + (k-1)*(dilation-1); "same"
    padding for odd k is ((k-1)*dilation)//2.
    """

    weight: Tensor  # (C_out, C_in, k, k)
    bias: Tensor    # (C_out,)
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ConfigError(f"conv weight must be (C_out, C_in, k, k), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {w.shape[2]}")
        if self.bias.shape != (w.shape[0],):
            raise ConfigError(
                f"conv bias shape {self.bias.shape} does not match C_out={w.shape[0]}"
            )
        if self.stride < 1 or self.dilation < 1:
            raise ConfigError("stride and dilation must be positive")

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    @property
    def padding(self):
        return ((self.kernel_size - 1) * self.dilation) // 2

    @property
    def extent(self):
        k = self.kernel_size
        return k + (k - 1) * (self.dilation - 1)


def _im2col(xp, k, dilation, stride, h_out, w_out):
    """Lower padded input (N,C,Hp,Wp) to (N, C*k*k, h_out*w_out) patches."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, h_out, w_out),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
    )
    return view.reshape(n, c * k * k, h_out * w_out)


def _pad_hw(x, p):
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Dilated 2-D convolution; spatial size is preserved at stride 1."""
    if x.ndim != 4:
        raise ConfigError(f"conv2d input must be 4-d NCHW, got {x.shape}")
    w, b = params.weight, params.bias
    c_out, c_in, k, _ = w.shape
    if x.shape[1] != c_in:
        raise ConfigError(f"conv2d input has {x.shape[1]} channels, weight expects {c_in}")
    n, _, h, wd = x.shape
    d, s, p = params.dilation, params.stride, params.padding
    span = (k - 1) * d + 1
    h_out = (h + 2 * p - span) // s + 1
    w_out = (wd + 2 * p - span) // s + 1
    if h_out < 1 or w_out < 1:
        raise ConfigError(f"conv2d input {h}x{wd} too small for kernel extent {span}")

    xp = _pad_hw(x.data, p)
    cols = _im2col(xp, k, d, s, h_out, w_out)
    w2 = w.data.reshape(c_out, -1)
    y = np.matmul(w2, cols)
    y += b.data[:, None]
    out = Tensor(y.reshape(n, c_out, h_out, w_out))

    def backward(g):
        g3 = g.reshape(n, c_out, h_out * w_out)
        if b.requires_grad:
            b.accumulate_grad(g3.sum(axis=(0, 2)))
        if w.requires_grad or x.requires_grad:
            # Patches are recomputed rather than saved: one extra copy in
            # exchange for not holding 9x activations across the step.
            cols_b = _im2col(_pad_hw(x.data, p), k, d, s, h_out, w_out)
        if w.requires_grad:
            dw = np.matmul(g3, cols_b.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(dw.reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3).reshape(n, c_in, k, k, h_out, w_out)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[
                        :,
                        :,
                        ki * d : ki * d + s * h_out : s,
                        kj * d : kj * d + s * w_out : s,
                    ] += dcols[:, :, ki, kj]
            dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
            x.accumulate_grad(dx)

    return record_op((x, w, b), out, backward)


class BatchNormState:
    """Per-channel running statistics (population variance convention)."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self):
        return self.running_mean.shape[0]

    def reset(self):
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Per-channel batch normalization over the N*H*W axis."""
    if x.ndim != 4:
        raise ConfigError(f"batchnorm2d input must be 4-d NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.channels != c:
        raise ConfigError(
            f"batchnorm2d channel mismatch: input C={c}, gamma {gamma.shape}, "
            f"beta {beta.shape}, state C={state.channels}"
        )
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mu.astype(state.running_mean.dtype)
        state.running_var *= 1.0 - m
        state.running_var += m * var.astype(state.running_var.dtype)
    else:
        mu = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu[:, None, None]) * inv[:, None, None]
    out = Tensor(gamma.data[:, None, None] * xhat + beta.data[:, None, None])

    def backward(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gs = g * gamma.data[:, None, None]
            if training:
                dx = inv[:, None, None] * (
                    gs
                    - gs.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gs * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                dx = gs * inv[:, None, None]
            x.accumulate_grad(dx)

    return record_op((x, gamma, beta), out, backward)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0))

    return record_op((x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output clipped into the open (0,1)."""
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    info = np.finfo(xd.dtype)
    np.clip(y, info.tiny, np.nextafter(xd.dtype.type(1.0), xd.dtype.type(0.0)), out=y)
    out = Tensor(y)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * y * (1.0 - y))

    return record_op((x,), out, backward)


@lru_cache(maxsize=64)
def _interp_matrix(n_in, scale, dtype_name):
    """Dense 1-d bilinear interpolation matrix, half-pixel centers."""
    n_out = n_in * scale
    m = np.zeros((n_out, n_in), dtype=np.dtype(dtype_name))
    pos = np.clip((np.arange(n_out) + 0.5) / scale - 0.5, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    for i in range(n_out):
        m[i, lo[i]] += 1.0 - frac[i]
        m[i, hi[i]] += frac[i]
    return m


def upsample_bilinear_axes(x: Tensor, scale_h: int, scale_w: int) -> Tensor:
    """Separable bilinear upsampling (align-corners off).

    The forward pass is Ry @ x @ Rx^T with small dense interpolation
    matrices, so the backward pass is the literal transpose of the
    forward linear map.
    """
    if x.ndim != 4:
        raise ConfigError(f"upsample input must be 4-d NCHW, got {x.shape}")
    h, w = x.shape[2:]
    ry = _interp_matrix(h, scale_h, x.dtype.name)
    rx = _interp_matrix(w, scale_w, x.dtype.name)
    out = Tensor(np.matmul(np.matmul(ry, x.data), rx.T))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.matmul(ry.T, np.matmul(g, rx)))

    return record_op((x,), out, backward)


def bilinear_upsample(x: Tensor, scale: int) -> Tensor:
    """Upsample H and W by an integer factor >= 2, half-pixel centers."""
    if not isinstance(scale, (int, np.integer)) or scale < 2:
        raise ConfigError(f"bilinear_upsample scale must be an integer >= 2, got {scale}")
    return upsample_bilinear_axes(x, int(scale), int(scale))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W, keeping a 1x1 spatial footprint."""
    if x.ndim != 4:
        raise ConfigError(f"global_avg_pool input must be 4-d NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g / hw, x.shape))

    return record_op((x,), out, backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; requires even H and W."""
    if x.ndim != 4:
        raise ConfigError(f"maxpool2 input must be 4-d NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    def backward(g):
        if x.requires_grad:
            # Ties route to the first max so each upstream unit lands on
            # exactly one input cell.
            dwin = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = (
                dwin.reshape(n, c, ho, wo, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            x.accumulate_grad(dx)

    return record_op((x,), out, backward)


def concat_channels(inputs) -> Tensor:
    """Concatenate along the channel axis; N, H, W must match."""
    inputs = list(inputs)
    if not inputs:
        raise ConfigError("concat_channels needs at least one input")
    ref = inputs[0]
    for t in inputs[1:]:
        if t.ndim != 4 or ref.ndim != 4:
            raise ConfigError("concat_channels inputs must be 4-d NCHW")
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref.shape[0], ref.shape[2], ref.shape[3]):
            raise ConfigError(
                f"concat_channels N/H/W mismatch: {ref.shape} vs {t.shape}"
            )
    out = Tensor(np.concatenate([t.data for t in inputs], axis=1))
    offsets = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[:, lo:hi])

    return record_op(tuple(inputs), out, backward)


def _broadcast_check(a, b, opname):
    """Same shape, or one side is a 1-channel 4-d map broadcast over C."""
    if a.shape == b.shape:
        return
    if (
        a.ndim == 4
        and b.ndim == 4
        and a.shape[0] == b.shape[0]
        and a.shape[2:] == b.shape[2:]
        and (a.shape[1] == 1 or b.shape[1] == 1)
    ):
        return
    raise ConfigError(f"{opname} shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; scalar floats and 1-channel broadcast allowed."""
    if isinstance(b, (int, float)):
        out = Tensor(a.data + b)

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g)

        return record_op((a,), out, backward)

    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b.shape))

    return record_op((a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(-g, b.shape))

    return record_op((a, b), out, backward)


def elementwise_mul(a: Tensor, b) -> Tensor:
    """Elementwise product; the attention gate broadcasts a 1-channel mask."""
    if isinstance(b, (int, float)):
        out = Tensor(a.data * b)

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g * b)

        return record_op((a,), out, backward)

    _broadcast_check(a, b, "elementwise_mul")
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b.shape))

    return record_op((a, b), out, backward)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    return record_op((x,), out, backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient passes through inside the range."""
    out = Tensor(np.clip(x.data, lo, hi))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * ((x.data >= lo) & (x.data <= hi)))

    return record_op((x,), out, backward)


def tsum(x: Tensor) -> Tensor:
    """Full reduction to a 0-d scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.shape))

    return record_op((x,), out, backward)


def tmean(x: Tensor) -> Tensor:
    """Full reduction to the mean, as a 0-d scalar tensor."""
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    inv = 1.0 / x.size

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g * inv, x.shape))

    return record_op((x,), out, backward)
