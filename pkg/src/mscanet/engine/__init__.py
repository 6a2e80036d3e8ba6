"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .ops import (
    BatchNormState,
    ConvParams,
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
    upsample_bilinear_axes,
)
from . import tensor as tensor_mod
from .tensor import Tape, Tensor

__all__ = [
    "BatchNormState",
    "ConvParams",
    "Tape",
    "Tensor",
    "add",
    "batchnorm2d",
    "bilinear_upsample",
    "clamp",
    "concat_channels",
    "conv2d",
    "elementwise_mul",
    "global_avg_pool",
    "log",
    "maxpool2",
    "relu",
    "sigmoid",
    "sub",
    "tmean",
    "tsum",
    "upsample_bilinear_axes",
]
