"""Crowd counting network: VGG-style encoder, stacked dense context
modules, and a hierarchical attention-guided decoder.

The encoder keeps three pooling stages, so features exist at strides 2,
4 and 8.  Dense context modules chain three dilated 3x3 convolutions
(rates 2, 4, 6 by default) with dense connections plus a global-average
branch, fused back to the trunk width by a 1x1 convolution so modules
stack.  The decoder fuses stride-8 context with the stride-4 and
stride-2 encoder taps; a small sigmoid attention head at each fusion
level predicts foreground, and the finest attention map gates the
features entering the density estimator.

Variants for the ablation matrix: "backbone" is encoder + density head
only, "no-hag" adds the context stack, "full" adds the decoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    BatchNormState,
    ConvParams,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    elementwise_mul,
    maxpool2,
    relu,
    sigmoid,
    global_avg_pool,
    upsample_bilinear_axes,
)
from .errors import CheckpointError, ConfigError, InputError

VARIANTS = ("full", "no-hag", "backbone")

# Encoder block widths (before width_scale) and convs per block; the
# last block runs dilated at stride 8 instead of pooling further.
BLOCK_WIDTHS = (64, 128, 256, 512, 512)
BLOCK_DEPTHS = (2, 2, 3, 3, 3)


@dataclass
class ModelConfig:
    """Structural knobs; width_scale shrinks every channel count uniformly."""

    width_scale: float = 1.0
    in_channels: int = 1
    dcam_count: int = 3
    dcam_dilations: tuple = (2, 4, 6)
    kernel_size: int = 3
    sam_widths: tuple = (64, 32)
    dme_widths: tuple = (64, 32)
    c5_dilation: int = 2
    vgg_layers: int = 13  # 13 = all five blocks; 10 = stop after block 4
    variant: str = "full"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.dcam_dilations = tuple(int(d) for d in self.dcam_dilations)
        self.sam_widths = tuple(int(w) for w in self.sam_widths)
        self.dme_widths = tuple(int(w) for w in self.dme_widths)
        if not 0.0 < self.width_scale <= 1.0:
            raise ConfigError(f"width_scale must be in (0, 1], got {self.width_scale}")
        if self.width_scale * 64 < 4:
            raise ConfigError("width_scale too small: 64 * width_scale must be >= 4")
        if any(d < 1 for d in self.dcam_dilations) or any(
            b <= a for a, b in zip(self.dcam_dilations, self.dcam_dilations[1:])
        ):
            raise ConfigError(f"dilations must be strictly increasing >= 1, got {self.dcam_dilations}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.vgg_layers not in (10, 13):
            raise ConfigError(f"vgg_layers must be 10 or 13, got {self.vgg_layers}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dcam_count < 1:
            raise ConfigError(f"dcam_count must be >= 1, got {self.dcam_count}")

    def scaled(self, width: int) -> int:
        return max(1, int(round(width * self.width_scale)))


@dataclass
class EncoderFeatures:
    """Encoder taps at strides 2 and 4 plus the context-stack output."""

    f2: Tensor
    f3: Tensor
    f6: Tensor


@dataclass
class ModelOutputs:
    """Density map plus attention maps (coarse to fine) when present."""

    density: Tensor
    att_maps: list = field(default_factory=list)
    density_stride: int = 2
    taps: dict | None = None


class _Registry:
    def __init__(self):
        self.params = []   # (name, kind, Tensor); kind in w/b/gamma/beta
        self.buffers = []  # (name, BatchNormState, attr)


class Conv:
    """One convolution layer with same-padding weights."""

    def __init__(self, c_in, c_out, k, dilation=1, dtype=np.float32):
        self.weight = Tensor(np.zeros((c_out, c_in, k, k), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.params = ConvParams(self.weight, self.bias, dilation=dilation)

    def register(self, reg, name):
        reg.params.append((name + ".w", "w", self.weight))
        reg.params.append((name + ".b", "b", self.bias))

    def __call__(self, x):
        return conv2d(x, self.params)


class ConvBNReLU:
    """3x3 (or 1x1) convolution followed by batch norm and ReLU."""

    def __init__(self, c_in, c_out, k, dilation=1, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.conv = Conv(c_in, c_out, k, dilation=dilation, dtype=dtype)
        self.gamma = Tensor(np.ones(c_out, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.state = BatchNormState(c_out, eps=eps, momentum=momentum, dtype=dtype)

    def register(self, reg, name):
        self.conv.register(reg, name)
        reg.params.append((name + ".gamma", "gamma", self.gamma))
        reg.params.append((name + ".beta", "beta", self.beta))
        reg.buffers.append((name + ".rmean", self.state, "running_mean"))
        reg.buffers.append((name + ".rvar", self.state, "running_var"))

    def forward(self, x, training):
        return relu(batchnorm2d(self.conv(x), self.gamma, self.beta, self.state, training))


class DenseContextModule:
    """Densely connected dilated convolutions plus a global pooling branch.

    Each dilated branch reads the trunk concatenated with every earlier
    branch and emits half the trunk width; a 1x1 fusion convolution maps
    the pooled branch plus all dilated branches back to the trunk width.
    """

    def __init__(self, channels, dilations, k, eps, momentum, dtype):
        self.channels = channels
        branch = max(1, channels // 2)
        self.branch_convs = []
        c_in = channels
        for d in dilations:
            self.branch_convs.append(
                ConvBNReLU(c_in, branch, k, dilation=d, eps=eps, momentum=momentum, dtype=dtype)
            )
            c_in += branch
        self.fuse = Conv(channels + branch * len(dilations), channels, 1, dtype=dtype)

    def register(self, reg, name):
        for i, cbr in enumerate(self.branch_convs):
            cbr.register(reg, f"{name}.branch{i}")
        self.fuse.register(reg, name + ".fuse")

    def forward(self, x, training, return_branches=False):
        if x.shape[1] != self.channels:
            raise ConfigError(
                f"context module expects {self.channels} channels, got {x.shape[1]}"
            )
        feats = [x]
        branches = []
        for cbr in self.branch_convs:
            inp = feats[0] if len(feats) == 1 else concat_channels(feats)
            h = cbr.forward(inp, training)
            branches.append(h)
            feats.append(h)
        pooled = upsample_bilinear_axes(global_avg_pool(x), x.shape[2], x.shape[3])
        out = self.fuse(concat_channels([pooled] + branches))
        if return_branches:
            return out, branches
        return out


class SemanticAttentionModule:
    """Two conv-BN-ReLU layers, a 1x1 conv-BN, then a sigmoid map."""

    def __init__(self, c_in, widths, eps, momentum, dtype):
        w0, w1 = widths
        self.cbr1 = ConvBNReLU(c_in, w0, 3, eps=eps, momentum=momentum, dtype=dtype)
        self.cbr2 = ConvBNReLU(w0, w1, 3, eps=eps, momentum=momentum, dtype=dtype)
        self.final = Conv(w1, 1, 1, dtype=dtype)
        self.gamma = Tensor(np.ones(1, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        self.state = BatchNormState(1, eps=eps, momentum=momentum, dtype=dtype)

    def register(self, reg, name):
        self.cbr1.register(reg, name + ".cbr1")
        self.cbr2.register(reg, name + ".cbr2")
        self.final.register(reg, name + ".final")
        reg.params.append((name + ".gamma", "gamma", self.gamma))
        reg.params.append((name + ".beta", "beta", self.beta))
        reg.buffers.append((name + ".rmean", self.state, "running_mean"))
        reg.buffers.append((name + ".rvar", self.state, "running_var"))

    def forward(self, x, training):
        h = self.cbr2.forward(self.cbr1.forward(x, training), training)
        return sigmoid(batchnorm2d(self.final(h), self.gamma, self.beta, self.state, training))


class FeatureFusion:
    """Upsample the deep map x2, concat the shallow tap, fuse with a 3x3."""

    def __init__(self, c_deep, c_shallow, eps, momentum, dtype):
        self.fuse = ConvBNReLU(c_deep + c_shallow, c_shallow, 3, eps=eps,
                               momentum=momentum, dtype=dtype)

    def register(self, reg, name):
        self.fuse.register(reg, name)

    def forward(self, deep, shallow, training):
        if (shallow.shape[2], shallow.shape[3]) != (2 * deep.shape[2], 2 * deep.shape[3]):
            raise ConfigError(
                f"fusion spatial mismatch: shallow {shallow.shape} is not 2x deep {deep.shape}"
            )
        up = upsample_bilinear_axes(deep, 2, 2)
        return self.fuse.forward(concat_channels([up, shallow]), training)


class DensityEstimator:
    """Density head: two conv-BN-ReLU layers and a 1x1 conv with final ReLU."""

    def __init__(self, c_in, widths, eps, momentum, dtype):
        w0, w1 = widths
        self.cbr1 = ConvBNReLU(c_in, w0, 3, eps=eps, momentum=momentum, dtype=dtype)
        self.cbr2 = ConvBNReLU(w0, w1, 3, eps=eps, momentum=momentum, dtype=dtype)
        self.final = Conv(w1, 1, 1, dtype=dtype)

    def register(self, reg, name):
        self.cbr1.register(reg, name + ".cbr1")
        self.cbr2.register(reg, name + ".cbr2")
        self.final.register(reg, name + ".final")

    def forward(self, x, training):
        h = self.cbr2.forward(self.cbr1.forward(x, training), training)
        return relu(self.final(h))


class MSCANet:
    """The full network; see the module docstring for the layout."""

    def __init__(self, config: ModelConfig, dtype=np.float32, seed=0):
        self.config = config
        self.dtype = np.dtype(dtype)
        cfg = config
        eps, mom = cfg.bn_eps, cfg.bn_momentum
        k = cfg.kernel_size

        widths = [cfg.scaled(w) for w in BLOCK_WIDTHS]
        n_blocks = 5 if cfg.vgg_layers == 13 else 4
        self.blocks = []
        c_in = cfg.in_channels
        for bi in range(n_blocks):
            dil = cfg.c5_dilation if bi == 4 else 1
            block = []
            for _ in range(BLOCK_DEPTHS[bi]):
                block.append(ConvBNReLU(c_in, widths[bi], k, dilation=dil,
                                        eps=eps, momentum=mom, dtype=dtype))
                c_in = widths[bi]
            self.blocks.append(block)
        trunk_c = widths[n_blocks - 1]
        self.trunk_channels = trunk_c

        self.dcams = []
        if cfg.variant in ("full", "no-hag"):
            for _ in range(cfg.dcam_count):
                self.dcams.append(
                    DenseContextModule(trunk_c, cfg.dcam_dilations, k, eps, mom, dtype)
                )

        sam_w = tuple(cfg.scaled(w) for w in cfg.sam_widths)
        dme_w = tuple(cfg.scaled(w) for w in cfg.dme_widths)
        if cfg.variant == "full":
            f2_c, f3_c = widths[1], widths[2]
            self.sam1 = SemanticAttentionModule(trunk_c, sam_w, eps, mom, dtype)
            self.fm1 = FeatureFusion(trunk_c, f3_c, eps, mom, dtype)
            self.sam2 = SemanticAttentionModule(f3_c, sam_w, eps, mom, dtype)
            self.fm2 = FeatureFusion(f3_c, f2_c, eps, mom, dtype)
            self.sam3 = SemanticAttentionModule(f2_c, sam_w, eps, mom, dtype)
            self.dme = DensityEstimator(f2_c, dme_w, eps, mom, dtype)
        else:
            self.sam1 = self.sam2 = self.sam3 = None
            self.fm1 = self.fm2 = None
            self.dme = DensityEstimator(trunk_c, dme_w, eps, mom, dtype)

        self._registry = _Registry()
        self._register_all()
        self.init_params(seed)

    def _register_all(self):
        reg = self._registry
        for bi, block in enumerate(self.blocks):
            for li, layer in enumerate(block):
                layer.register(reg, f"enc.c{bi + 1}.{li}")
        for di, dcam in enumerate(self.dcams):
            dcam.register(reg, f"ctx.{di}")
        if self.config.variant == "full":
            self.sam1.register(reg, "dec.sam1")
            self.fm1.register(reg, "dec.fm1")
            self.sam2.register(reg, "dec.sam2")
            self.fm2.register(reg, "dec.fm2")
            self.sam3.register(reg, "dec.sam3")
        self.dme.register(reg, "dme")

    # -- parameter access ------------------------------------------------

    def named_parameters(self):
        return [(name, t) for name, _, t in self._registry.params]

    def parameters(self):
        return [t for _, _, t in self._registry.params]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def init_params(self, seed, std=0.01):
        """Gaussian conv weights, zero biases and shifts, unit BN scales.

        Draw order follows declaration order, so a seed pins every value.
        """
        rng = np.random.default_rng(seed)
        for _, kind, t in self._registry.params:
            if kind == "w":
                t.data = rng.normal(0.0, std, t.shape).astype(self.dtype)
            elif kind == "gamma":
                t.data = np.ones(t.shape, dtype=self.dtype)
            else:  # conv bias or BN shift
                t.data = np.zeros(t.shape, dtype=self.dtype)
            t.grad = None
        for _, state, attr in self._registry.buffers:
            if attr == "running_mean":
                state.running_mean[:] = 0.0
            else:
                state.running_var[:] = 1.0

    def state_entries(self):
        """Every persistable array (parameters then BN buffers), in order."""
        entries = [(name, t.data) for name, _, t in self._registry.params]
        entries += [(name, getattr(state, attr)) for name, state, attr in self._registry.buffers]
        return entries

    def load_state(self, arrays):
        entries = self.state_entries()
        if len(arrays) != len(entries):
            raise CheckpointError(
                f"checkpoint holds {len(arrays)} arrays, model needs {len(entries)}"
            )
        n_params = len(self._registry.params)
        for i, ((name, _, t), arr) in enumerate(zip(self._registry.params, arrays)):
            if arr.shape != t.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(self.dtype)
            t.grad = None
        for (name, state, attr), arr in zip(self._registry.buffers, arrays[n_params:]):
            target = getattr(state, attr)
            if arr.shape != target.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {target.shape}")
            target[:] = arr.astype(target.dtype)

    # -- forward passes ---------------------------------------------------

    def _as_input(self, image):
        if isinstance(image, Tensor):
            x = image
        else:
            x = Tensor(np.asarray(image, dtype=self.dtype))
        if x.ndim != 4:
            raise InputError(f"model input must be NCHW, got shape {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise InputError(
                f"model expects {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise InputError(f"input H,W must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")
        return x

    def backbone_forward(self, image, training=False):
        """Run the encoder; returns the stride-2 and stride-4 taps and the
        stride-8 trunk output (pre context stack)."""
        x = self._as_input(image)
        h = x
        f2 = f3 = None
        for bi, block in enumerate(self.blocks):
            for layer in block:
                h = layer.forward(h, training)
            if bi == 0:
                h = maxpool2(h)
            elif bi == 1:
                f2 = h
                h = maxpool2(h)
            elif bi == 2:
                f3 = h
                h = maxpool2(h)
        return f2, f3, h

    def context_forward(self, trunk, training=False):
        h = trunk
        for dcam in self.dcams:
            h = dcam.forward(h, training)
        return h

    def forward(self, image, training=False, gate_override=None, return_taps=False):
        """Full forward pass.

        ``gate_override`` replaces the finest attention map by a constant
        (0 disables the density path entirely, 1 reproduces the ungated
        head); used by the gate-soundness checks.
        """
        f2, f3, trunk = self.backbone_forward(image, training)
        taps = {"f2": f2, "f3": f3, "trunk": trunk} if return_taps else None

        if self.config.variant == "backbone":
            density = self.dme.forward(trunk, training)
            return ModelOutputs(density=density, att_maps=[], density_stride=8, taps=taps)

        f6 = self.context_forward(trunk, training)
        if return_taps:
            taps["f6"] = f6
        if self.config.variant == "no-hag":
            density = self.dme.forward(f6, training)
            return ModelOutputs(density=density, att_maps=[], density_stride=8, taps=taps)

        att1 = self.sam1.forward(f6, training)
        m36 = self.fm1.forward(f6, f3, training)
        att2 = self.sam2.forward(m36, training)
        m23 = self.fm2.forward(m36, f2, training)
        att3 = self.sam3.forward(m23, training)
        gate = att3
        if gate_override is not None:
            gate = Tensor(np.full(att3.shape, float(gate_override), dtype=self.dtype))
        gated = elementwise_mul(m23, gate)
        density = self.dme.forward(gated, training)
        if return_taps:
            taps.update({"m36": m36, "m23": m23, "att1": att1, "att2": att2,
                         "att3": att3, "gated": gated})
        return ModelOutputs(density=density, att_maps=[att1, att2, att3],
                            density_stride=2, taps=taps)

    def encoder_features(self, image, training=False) -> EncoderFeatures:
        f2, f3, trunk = self.backbone_forward(image, training)
        return EncoderFeatures(f2=f2, f3=f3, f6=self.context_forward(trunk, training))


# -- checkpoint format ----------------------------------------------------
#
# magic "MSCA1", then the config block (little-endian), then every state
# array as <u32 ndim> <u32 dims...> <f32 data...> in declaration order:
#   f64 width_scale | u32 in_channels vgg_layers dcam_count kernel_size
#   c5_dilation | u32 n_dilations + dilations | u32 sam0 sam1 dme0 dme1 |
#   u32 variant | f64 bn_eps bn_momentum | u32 n_arrays | arrays

MAGIC = b"MSCA1"
_VARIANT_CODES = {name: i for i, name in enumerate(VARIANTS)}


def _write_u32(fh, *values):
    fh.write(struct.pack("<" + "I" * len(values), *values))


def _read_u32(fh, n=1):
    vals = struct.unpack("<" + "I" * n, fh.read(4 * n))
    return vals[0] if n == 1 else vals


def _write_f64(fh, *values):
    fh.write(struct.pack("<" + "d" * len(values), *values))


def _read_f64(fh, n=1):
    vals = struct.unpack("<" + "d" * n, fh.read(8 * n))
    return vals[0] if n == 1 else vals


def _write_array(fh, arr):
    _write_u32(fh, arr.ndim, *arr.shape)
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(fh):
    ndim = _read_u32(fh)
    shape = _read_u32(fh, ndim) if ndim else ()
    if isinstance(shape, int):
        shape = (shape,)
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4", count=count)
    return data.reshape(shape).astype(np.float32)


def write_config(fh, cfg: ModelConfig):
    _write_f64(fh, cfg.width_scale)
    _write_u32(fh, cfg.in_channels, cfg.vgg_layers, cfg.dcam_count,
               cfg.kernel_size, cfg.c5_dilation)
    _write_u32(fh, len(cfg.dcam_dilations), *cfg.dcam_dilations)
    _write_u32(fh, *cfg.sam_widths, *cfg.dme_widths)
    _write_u32(fh, _VARIANT_CODES[cfg.variant])
    _write_f64(fh, cfg.bn_eps, cfg.bn_momentum)


def read_config(fh) -> ModelConfig:
    width_scale = _read_f64(fh)
    in_channels, vgg_layers, dcam_count, kernel_size, c5_dilation = _read_u32(fh, 5)
    ndil = _read_u32(fh)
    dil = _read_u32(fh, ndil)
    dilations = (dil,) if isinstance(dil, int) else tuple(dil)
    sam0, sam1, dme0, dme1 = _read_u32(fh, 4)
    variant_code = _read_u32(fh)
    bn_eps, bn_momentum = _read_f64(fh, 2)
    if variant_code >= len(VARIANTS):
        raise CheckpointError(f"unknown variant code {variant_code}")
    return ModelConfig(
        width_scale=width_scale,
        in_channels=in_channels,
        dcam_count=dcam_count,
        dcam_dilations=dilations,
        kernel_size=kernel_size,
        sam_widths=(sam0, sam1),
        dme_widths=(dme0, dme1),
        c5_dilation=c5_dilation,
        vgg_layers=vgg_layers,
        variant=VARIANTS[variant_code],
        bn_eps=bn_eps,
        bn_momentum=bn_momentum,
    )


def save_model(path, model: MSCANet, extra_writer=None):
    """Write a checkpoint; ``extra_writer(fh)`` may append trailing
    sections (the trainer uses it for optimizer state)."""
    entries = model.state_entries()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        write_config(fh, model.config)
        _write_u32(fh, len(entries))
        for _, arr in entries:
            _write_array(fh, arr)
        if extra_writer is not None:
            extra_writer(fh)


def load_model(path, dtype=np.float32):
    """Rebuild a model from a checkpoint; returns (model, open position)
    so callers can read trailing sections from the same file."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(
                f"bad checkpoint magic {magic!r}; expected {MAGIC!r} (version mismatch?)"
            )
        cfg = read_config(fh)
        n_arrays = _read_u32(fh)
        arrays = [_read_array(fh) for _ in range(n_arrays)]
        trailer = fh.read()
    model = MSCANet(cfg, dtype=dtype)
    model.load_state(arrays)
    return model, trailer
