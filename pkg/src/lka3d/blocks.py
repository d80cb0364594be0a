"""Layer vocabulary: LKA unit, attention module, ConvFF, patch embed/expand,
and the repeating LKA block, on top of a small Module/Parameter system.

The large-kernel attention unit decomposes a dense depthwise kernel into a
small depthwise convolution, a dilated depthwise convolution and a pointwise
convolution; ``compose_depthwise`` materializes the dense equivalent of the
two spatial stages so the decomposition can be checked directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, Tensor


class Parameter(Tensor):
    """A Tensor registered as a trainable leaf."""

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Minimal container for parameters, buffers and child modules.

    Attribute assignment registers Parameters and Modules automatically;
    numpy buffers (batch-norm running stats) are registered explicitly so
    they are saved in checkpoints but excluded from optimization.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - (set(params) | set(buffers))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=p.data.dtype)
            if value.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.data.shape}")
            p.data = value.copy()
        for name, b in buffers.items():
            value = np.asarray(state[name], dtype=b.dtype)
            if value.shape != b.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {b.shape}")
            b[...] = value

    def to_dtype(self, dtype):
        """Convert all parameters and float buffers in place (for 64-bit checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name, b in m._buffers.items():
                if np.issubdtype(b.dtype, np.floating):
                    m._buffers[name] = b.astype(dtype)
                    object.__setattr__(m, name, m._buffers[name])
        return self


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list = []
        for m in mods:
            self.append(m)

    def append(self, mod):
        setattr(self, str(len(self._list)), mod)
        self._list.append(mod)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


class Sequential(Module):
    def __init__(self, mods=()):
        super().__init__()
        self.layers = ModuleList(mods)

    def forward(self, x):
        for m in self.layers:
            x = m(x)
        return x


# ----------------------------------------------------------------------
# leaf layers


class Conv3d(Module):
    """3D (transposed) convolution layer.

    Weights use He-uniform initialization with fan-in taken from the weight
    layout (``weight.shape[1] * prod(kernel)``); biases start at zero.
    """

    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, dilation=1,
                 padding=0, groups=1, transpose=False, output_padding=0, bias=True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.spec = ConvSpec(kernel=kernel, stride=stride, dilation=dilation,
                             padding=padding, groups=groups, transpose=transpose,
                             output_padding=output_padding if transpose else 0)
        if in_channels % groups or out_channels % groups:
            raise ValueError(f"groups={groups} must divide channels {in_channels}->{out_channels}")
        if transpose:
            wshape = (in_channels, out_channels // groups) + self.spec.kernel
        else:
            wshape = (out_channels, in_channels // groups) + self.spec.kernel
        fan_in = wshape[1] * int(np.prod(self.spec.kernel))
        bound = math.sqrt(6.0 / fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=wshape))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x):
        return T.conv3d(x, self.weight, self.bias, self.spec)


class BatchNorm3d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class ChannelLayerNorm(Module):
    """Layer norm across the channel axis, applied independently per voxel."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        return T.layer_norm_channels(x, self.gamma, self.beta, eps=self.eps)


class GELU(Module):
    def forward(self, x):
        return T.gelu(x)


# ----------------------------------------------------------------------
# block parameterization


@dataclass(frozen=True)
class LKAParams:
    """Kernel plan of one large-kernel attention unit."""

    channels: int
    dw_kernel: int = 5
    dilated_kernel: int = 7
    dilation: int = 3

    def __post_init__(self):
        if self.dw_kernel % 2 == 0 or self.dilated_kernel % 2 == 0:
            raise ValueError(f"kernel sizes must be odd: {self}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1: {self}")
        if self.channels < 1:
            raise ValueError(f"channels must be positive: {self}")

    @property
    def composed_support(self):
        # (k1-1)*d1 + (k2-1)*d2 + 1 per axis; 23 for the 5/7/3 defaults
        return (self.dw_kernel - 1) + self.dilation * (self.dilated_kernel - 1) + 1


@dataclass(frozen=True)
class BlockParams:
    """Plan of one encoder/decoder stage block."""

    in_channels: int
    out_channels: int
    repeats: int = 1
    embed_stride: int = 2
    ffn_expansion: float = 4.0
    layer_scale_init: float = 1e-2

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1: {self}")
        if self.embed_stride not in (1, 2):
            raise ValueError(f"embed_stride must be 1 or 2: {self}")


# ----------------------------------------------------------------------
# LKA layers


class LKAUnit(Module):
    """x ⊙ PConv(dDWConv(DWConv(x))): attention mask multiplied over the input.

    Padding keeps every stage shape-preserving: (k−1)/2 for the depthwise
    stage, dilation·(k−1)/2 for the dilated stage.
    """

    def __init__(self, params: LKAParams, rng):
        super().__init__()
        self.params = params
        c = params.channels
        self.conv0 = Conv3d(c, c, params.dw_kernel, rng,
                            padding=(params.dw_kernel - 1) // 2, groups=c)
        self.conv_spatial = Conv3d(c, c, params.dilated_kernel, rng,
                                   dilation=params.dilation,
                                   padding=params.dilation * (params.dilated_kernel - 1) // 2,
                                   groups=c)
        self.conv1 = Conv3d(c, c, 1, rng)

    def forward(self, x):
        if x.shape[1] != self.params.channels:
            raise ValueError(f"expected {self.params.channels} channels, got {x.shape[1]}")
        attn = self.conv1(self.conv_spatial(self.conv0(x)))
        return T.mul(x, attn)


class AttentionModule(Module):
    """x + PConv(LKA(GELU(PConv(x)))), both PConvs C→C."""

    def __init__(self, params: LKAParams, rng):
        super().__init__()
        c = params.channels
        self.proj_1 = Conv3d(c, c, 1, rng)
        self.activation = GELU()
        self.spatial_gating_unit = LKAUnit(params, rng)
        self.proj_2 = Conv3d(c, c, 1, rng)

    def forward(self, x):
        shortcut = x
        x = self.proj_2(self.spatial_gating_unit(self.activation(self.proj_1(x))))
        return T.add(shortcut, x)


class ConvFF(Module):
    """PConv(C→E) → depthwise 3³ → GELU → PConv(E→C); residual added by the block."""

    def __init__(self, channels, expansion, rng):
        super().__init__()
        hidden = max(1, int(round(channels * expansion)))
        self.fc1 = Conv3d(channels, hidden, 1, rng)
        self.dwconv = Conv3d(hidden, hidden, 3, rng, padding=1, groups=hidden)
        self.act = GELU()
        self.fc2 = Conv3d(hidden, channels, 1, rng)

    def forward(self, x):
        return self.fc2(self.act(self.dwconv(self.fc1(x))))


class PatchEmbed(Module):
    """Overlapping patch embedding: 3³ conv (stride s, pad 1) + batch norm."""

    def __init__(self, in_channels, out_channels, stride, rng):
        super().__init__()
        self.proj = Conv3d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.norm = BatchNorm3d(out_channels)

    def forward(self, x):
        return self.norm(self.proj(x))


class PatchExpand(Module):
    """Learnt upsampling: transpose conv 3³ (stride 2, pad 1, output pad 1) + batch norm."""

    def __init__(self, in_channels, out_channels, rng):
        super().__init__()
        self.proj = Conv3d(in_channels, out_channels, 3, rng, stride=2, padding=1,
                           transpose=True, output_padding=1)
        self.norm = BatchNorm3d(out_channels)

    def forward(self, x):
        return self.norm(self.proj(x))


class LKARepeat(Module):
    """One repeating unit: y + λ1⊙attn(BN(y)), then y + λ2⊙convff(BN(y))."""

    def __init__(self, params: LKAParams, ffn_expansion, layer_scale_init, rng):
        super().__init__()
        c = params.channels
        self.norm1 = BatchNorm3d(c)
        self.attn = AttentionModule(params, rng)
        self.norm2 = BatchNorm3d(c)
        self.mlp = ConvFF(c, ffn_expansion, rng)
        self.layer_scale_1 = Parameter(np.full(c, layer_scale_init))
        self.layer_scale_2 = Parameter(np.full(c, layer_scale_init))

    def _scaled(self, scale, branch):
        c = branch.shape[1]
        return T.mul(T.reshape(scale, (1, c, 1, 1, 1)), branch)

    def forward(self, x):
        x = T.add(x, self._scaled(self.layer_scale_1, self.attn(self.norm1(x))))
        x = T.add(x, self._scaled(self.layer_scale_2, self.mlp(self.norm2(x))))
        return x


class LKABlock(Module):
    """Patch embedding followed by N repeat units and a channel layer norm.

    ``forward`` can also return the pre-normalization feature map, which the
    receptive-field analysis differentiates through.
    """

    def __init__(self, block: BlockParams, rng, dw_kernel=5, dilated_kernel=7, dilation=3):
        super().__init__()
        self.block_params = block
        lka = LKAParams(channels=block.out_channels, dw_kernel=dw_kernel,
                        dilated_kernel=dilated_kernel, dilation=dilation)
        self.patch_embed = PatchEmbed(block.in_channels, block.out_channels,
                                      block.embed_stride, rng)
        self.repeats = ModuleList(
            LKARepeat(lka, block.ffn_expansion, block.layer_scale_init, rng)
            for _ in range(block.repeats)
        )
        self.norm = ChannelLayerNorm(block.out_channels)

    def forward(self, x, return_pre_norm=False):
        y = self.patch_embed(x)
        for rep in self.repeats:
            y = rep(y)
        out = self.norm(y)
        if return_pre_norm:
            return out, y
        return out


# ----------------------------------------------------------------------
# composition oracle


def compose_depthwise(w1, dilation1, w2, dilation2):
    """Dense per-channel kernel equivalent to depthwise w1 then depthwise w2.

    ``w1``/``w2`` have layout (C, 1, k, k, k) and apply as cross-correlations
    with dilations ``dilation1``/``dilation2``.  Because both tap offsets add,
    the composed dense kernel is their (dilated) discrete convolution, with
    support (k1−1)·d1 + (k2−1)·d2 + 1 per axis — 23 for the default 5/7/3
    plan.  Sequential application equals one dense cross-correlation with the
    returned kernel wherever the intermediate feature map is not truncated.
    """
    c, one, k1, _, _ = w1.shape
    c2, one2, k2, _, _ = w2.shape
    if c != c2 or one != 1 or one2 != 1:
        raise ValueError(f"expected depthwise (C,1,k,k,k) kernels, got {w1.shape} and {w2.shape}")
    size = dilation1 * (k1 - 1) + dilation2 * (k2 - 1) + 1
    dense = np.zeros((c, 1, size, size, size), dtype=np.result_type(w1, w2))
    for a in range(k2):
        for b in range(k2):
            for cc in range(k2):
                sl = (
                    slice(None), 0,
                    slice(a * dilation2, a * dilation2 + dilation1 * (k1 - 1) + 1, dilation1),
                    slice(b * dilation2, b * dilation2 + dilation1 * (k1 - 1) + 1, dilation1),
                    slice(cc * dilation2, cc * dilation2 + dilation1 * (k1 - 1) + 1, dilation1),
                )
                dense[sl] += w1[:, 0] * w2[:, 0, a, b, cc][:, None, None, None]
    return dense
