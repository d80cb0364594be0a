"""Network assembly: LKA-E, LKA-ED and a plain-convolution U-Net baseline,
with parameter/FLOP accounting and a versioned checkpoint container.

All variants share one stage plan: six encoder stages (stage 1 keeps full
resolution, stages 2-6 halve it), five decoder up-steps with skip
concatenation, and a pointwise logit head.  ``lka_e`` pairs the LKA encoder
with the plain convolutional decoder, ``lka_ed`` uses patch-expand plus LKA
repeat units in the decoder as well, and ``plain_unet`` replaces every LKA
block with two conv-BN-GELU layers (the first strided where the stage
downsamples).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    BatchNorm3d,
    BlockParams,
    ChannelLayerNorm,
    Conv3d,
    ConvFF,
    GELU,
    LKABlock,
    LKAParams,
    LKARepeat,
    LKAUnit,
    Module,
    ModuleList,
    PatchEmbed,
    PatchExpand,
    AttentionModule,
)

VARIANTS = ("lka_e", "lka_ed", "plain_unet")

CHECKPOINT_MAGIC = b"LKA3D\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    in_channels: int
    num_classes: int
    stage_channels: tuple = (32, 64, 128, 256, 320, 320)
    stage_repeats: tuple = (1, 1, 1, 1, 2, 1)
    dw_kernel: int = 5
    dilated_kernel: int = 7
    dilation: int = 3
    ffn_expansion: float = 12.0
    layer_scale_init: float = 1e-2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "stage_repeats", tuple(int(r) for r in self.stage_repeats))
        if len(self.stage_channels) != len(self.stage_repeats):
            raise ValueError("stage_channels and stage_repeats must have the same length")
        if len(self.stage_channels) < 2:
            raise ValueError("need at least two stages")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ValueError("in_channels and num_classes must be >= 1")
        if any(c < 1 for c in self.stage_channels) or any(r < 1 for r in self.stage_repeats):
            raise ValueError("stage channels and repeats must be positive")

    @property
    def num_stages(self):
        return len(self.stage_channels)

    @property
    def spatial_divisor(self):
        # stage 1 keeps resolution; each later stage halves it
        return 2 ** (self.num_stages - 1)


class PlainStage(Module):
    """Two 3³ conv-BN-GELU layers; the first is strided when downsampling."""

    def __init__(self, in_channels, out_channels, stride, rng):
        super().__init__()
        self.conv1 = Conv3d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.norm1 = BatchNorm3d(out_channels)
        self.conv2 = Conv3d(out_channels, out_channels, 3, rng, padding=1)
        self.norm2 = BatchNorm3d(out_channels)
        self.act = GELU()

    def forward(self, x, return_pre_norm=False):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.act(self.norm2(self.conv2(y)))
        if return_pre_norm:
            return y, y
        return y


class ConvDecoderStage(Module):
    """Transpose-conv 2³ upsample, skip concat, two 3³ conv-BN-GELU layers."""

    def __init__(self, in_channels, skip_channels, rng):
        super().__init__()
        self.up = Conv3d(in_channels, skip_channels, 2, rng, stride=2, transpose=True)
        self.conv1 = Conv3d(2 * skip_channels, skip_channels, 3, rng, padding=1)
        self.norm1 = BatchNorm3d(skip_channels)
        self.conv2 = Conv3d(skip_channels, skip_channels, 3, rng, padding=1)
        self.norm2 = BatchNorm3d(skip_channels)
        self.act = GELU()

    def forward(self, x, skip):
        y = self.up(x)
        y = T.concat([y, skip], axis=1)
        y = self.act(self.norm1(self.conv1(y)))
        return self.act(self.norm2(self.conv2(y)))


class LKADecoderStage(Module):
    """Patch expand, skip concat, pointwise 2C→C fuse, then LKA repeat units."""

    def __init__(self, in_channels, skip_channels, repeats, config: ModelConfig, rng):
        super().__init__()
        self.expand = PatchExpand(in_channels, skip_channels, rng)
        self.fuse = Conv3d(2 * skip_channels, skip_channels, 1, rng)
        lka = LKAParams(channels=skip_channels, dw_kernel=config.dw_kernel,
                        dilated_kernel=config.dilated_kernel, dilation=config.dilation)
        self.repeats = ModuleList(
            LKARepeat(lka, config.ffn_expansion, config.layer_scale_init, rng)
            for _ in range(repeats)
        )

    def forward(self, x, skip):
        y = self.expand(x)
        y = T.concat([y, skip], axis=1)
        y = self.fuse(y)
        for rep in self.repeats:
            y = rep(y)
        return y


class SegmentationModel(Module):
    """Shared encoder/decoder wiring for all variants."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        self.config = config
        chans = config.stage_channels
        self.stages = ModuleList()
        in_ch = config.in_channels
        for i, (c, n) in enumerate(zip(chans, config.stage_repeats)):
            stride = 1 if i == 0 else 2
            self.stages.append(self._make_stage(in_ch, c, n, stride, rng))
            in_ch = c
        self.decoder = ModuleList()
        for i in range(len(chans) - 2, -1, -1):
            self.decoder.append(self._make_decoder_stage(chans[i + 1], chans[i],
                                                         config.stage_repeats[i], rng))
        self.head = Conv3d(chans[0], config.num_classes, 1, rng)

    def _check_spatial(self, x):
        div = self.config.spatial_divisor
        bad = [d for d in x.shape[2:] if d % div]
        if bad:
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {div} "
                f"for the {self.config.num_stages}-stage stride plan")

    def encoder_features(self, x):
        feats = []
        y = x
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        return feats

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (N, {self.config.in_channels}, D, H, W) input, got {tuple(x.shape)}")
        self._check_spatial(x)
        feats = self.encoder_features(x)
        y = feats[-1]
        for i, dec in enumerate(self.decoder):
            y = dec(y, feats[-2 - i])
        return self.head(y)

    def forward_features(self, x, stage):
        """Feature map of encoder ``stage`` (1-based) before its final norm.

        For LKA stages this is the pre-LayerNorm feature; plain stages have
        no trailing stage norm, so their output is returned as-is.
        """
        if not 1 <= stage <= len(self.stages):
            raise ValueError(f"stage must be in 1..{len(self.stages)}, got {stage}")
        y = x
        for i in range(stage - 1):
            y = self.stages[i](y)
        _, pre = self.stages[stage - 1](y, return_pre_norm=True)
        return pre


class LKAUNet(SegmentationModel):
    def _make_stage(self, in_ch, out_ch, repeats, stride, rng):
        block = BlockParams(in_channels=in_ch, out_channels=out_ch, repeats=repeats,
                            embed_stride=stride, ffn_expansion=self.config.ffn_expansion,
                            layer_scale_init=self.config.layer_scale_init)
        return LKABlock(block, rng, dw_kernel=self.config.dw_kernel,
                        dilated_kernel=self.config.dilated_kernel,
                        dilation=self.config.dilation)

    def _make_decoder_stage(self, in_ch, skip_ch, repeats, rng):
        if self.config.variant == "lka_ed":
            return LKADecoderStage(in_ch, skip_ch, repeats, self.config, rng)
        return ConvDecoderStage(in_ch, skip_ch, rng)


class PlainUNet(SegmentationModel):
    def _make_stage(self, in_ch, out_ch, repeats, stride, rng):
        return PlainStage(in_ch, out_ch, stride, rng)

    def _make_decoder_stage(self, in_ch, skip_ch, repeats, rng):
        return ConvDecoderStage(in_ch, skip_ch, rng)


def build(config: ModelConfig, seed=0):
    """Construct a model; parameters are deterministic under (config, seed)."""
    rng = np.random.default_rng(seed)
    if config.variant == "plain_unet":
        model = PlainUNet(config, rng)
    else:
        model = LKAUNet(config, rng)
    return model


# ----------------------------------------------------------------------
# accounting


def count_params(model):
    """Total scalar parameter count (weights, biases, norm affines, scales)."""
    return sum(p.data.size for _, p in model.named_parameters())


# per-element costs for non-conv work, stated with every report
_NORM_FLOPS = 4
_GELU_FLOPS = 8
_EW_FLOPS = 1

FLOP_CONVENTION = (
    "multiply-accumulate = 2 FLOPs; conv = 2*out_voxels*Cout*(Cin/groups)*k^3 "
    "(transpose: 2*in_voxels*Cin*(Cout/groups)*k^3); "
    f"norms {_NORM_FLOPS}/element, GELU {_GELU_FLOPS}/element, "
    f"adds and scales {_EW_FLOPS}/element"
)


@dataclass
class FlopReport:
    rows: list = field(default_factory=list)  # (name, kind, out_shape, flops)
    convention: str = FLOP_CONVENTION

    def add(self, name, kind, out_shape, flops):
        self.rows.append((name, kind, tuple(out_shape), float(flops)))

    @property
    def total(self):
        return sum(r[3] for r in self.rows)

    @property
    def gflops(self):
        return self.total / 1e9

    def table(self):
        lines = [f"{'layer':<52} {'kind':<10} {'output':<20} {'GFLOPs':>10}"]
        for name, kind, shape, flops in self.rows:
            lines.append(f"{name:<52} {kind:<10} {str(shape):<20} {flops / 1e9:>10.4f}")
        lines.append(f"{'TOTAL':<52} {'':<10} {'':<20} {self.gflops:>10.4f}")
        lines.append(f"convention: {self.convention}")
        return "\n".join(lines)


def _vox(shape):
    n = 1
    for s in shape:
        n *= s
    return n


class _Tracer:
    """Walks the module tree in forward order, accumulating per-layer FLOPs."""

    def __init__(self, report):
        self.report = report

    def conv(self, name, mod, in_sp):
        spec = mod.spec
        out_sp = spec.out_shape(in_sp)
        k = _vox(spec.kernel)
        if spec.transpose:
            macs = _vox(in_sp) * mod.in_channels * (mod.out_channels // spec.groups) * k
        else:
            macs = _vox(out_sp) * mod.out_channels * (mod.in_channels // spec.groups) * k
        self.report.add(name, "tconv" if spec.transpose else "conv",
                        (mod.out_channels,) + tuple(out_sp), 2 * macs)
        return out_sp

    def elemwise(self, name, kind, channels, sp, per_element):
        self.report.add(name, kind, (channels,) + tuple(sp), per_element * channels * _vox(sp))

    def lka_unit(self, name, mod: LKAUnit, sp):
        c = mod.params.channels
        self.conv(f"{name}.conv0", mod.conv0, sp)
        self.conv(f"{name}.conv_spatial", mod.conv_spatial, sp)
        self.conv(f"{name}.conv1", mod.conv1, sp)
        self.elemwise(f"{name}.gate", "mul", c, sp, _EW_FLOPS)
        return sp

    def attention(self, name, mod: AttentionModule, sp):
        c = mod.spatial_gating_unit.params.channels
        self.conv(f"{name}.proj_1", mod.proj_1, sp)
        self.elemwise(f"{name}.activation", "gelu", c, sp, _GELU_FLOPS)
        self.lka_unit(f"{name}.spatial_gating_unit", mod.spatial_gating_unit, sp)
        self.conv(f"{name}.proj_2", mod.proj_2, sp)
        self.elemwise(f"{name}.residual", "add", c, sp, _EW_FLOPS)
        return sp

    def conv_ff(self, name, mod: ConvFF, sp):
        hidden = mod.fc1.out_channels
        self.conv(f"{name}.fc1", mod.fc1, sp)
        self.conv(f"{name}.dwconv", mod.dwconv, sp)
        self.elemwise(f"{name}.act", "gelu", hidden, sp, _GELU_FLOPS)
        self.conv(f"{name}.fc2", mod.fc2, sp)
        return sp

    def repeat(self, name, mod: LKARepeat, sp):
        c = mod.norm1.channels
        self.elemwise(f"{name}.norm1", "bn", c, sp, _NORM_FLOPS)
        self.attention(f"{name}.attn", mod.attn, sp)
        self.elemwise(f"{name}.scale1+add", "ew", c, sp, 2 * _EW_FLOPS)
        self.elemwise(f"{name}.norm2", "bn", c, sp, _NORM_FLOPS)
        self.conv_ff(f"{name}.mlp", mod.mlp, sp)
        self.elemwise(f"{name}.scale2+add", "ew", c, sp, 2 * _EW_FLOPS)
        return sp

    def module(self, name, mod, sp):
        if isinstance(mod, LKABlock):
            sp = self.module(f"{name}.patch_embed", mod.patch_embed, sp)
            for i, rep in enumerate(mod.repeats):
                sp = self.repeat(f"{name}.repeats.{i}", rep, sp)
            self.elemwise(f"{name}.norm", "ln", mod.norm.channels, sp, _NORM_FLOPS)
            return sp
        if isinstance(mod, (PatchEmbed, PatchExpand)):
            sp = self.conv(f"{name}.proj", mod.proj, sp)
            self.elemwise(f"{name}.norm", "bn", mod.norm.channels, sp, _NORM_FLOPS)
            return sp
        if isinstance(mod, PlainStage):
            for i in (1, 2):
                conv = getattr(mod, f"conv{i}")
                sp = self.conv(f"{name}.conv{i}", conv, sp)
                self.elemwise(f"{name}.norm{i}", "bn", conv.out_channels, sp, _NORM_FLOPS)
                self.elemwise(f"{name}.act{i}", "gelu", conv.out_channels, sp, _GELU_FLOPS)
            return sp
        raise TypeError(f"no FLOP rule for {type(mod).__name__}")

    def decoder_stage(self, name, mod, sp, skip_sp):
        if isinstance(mod, ConvDecoderStage):
            sp = self.conv(f"{name}.up", mod.up, sp)
            for i in (1, 2):
                conv = getattr(mod, f"conv{i}")
                sp = self.conv(f"{name}.conv{i}", conv, sp)
                self.elemwise(f"{name}.norm{i}", "bn", conv.out_channels, sp, _NORM_FLOPS)
                self.elemwise(f"{name}.act{i}", "gelu", conv.out_channels, sp, _GELU_FLOPS)
            return sp
        sp = self.module(f"{name}.expand", mod.expand, sp)
        sp = self.conv(f"{name}.fuse", mod.fuse, sp)
        for i, rep in enumerate(mod.repeats):
            sp = self.repeat(f"{name}.repeats.{i}", rep, sp)
        return sp


def flop_report(model, input_shape):
    """Per-layer FLOP table for a (D, H, W) input at batch size 1."""
    sp = tuple(int(s) for s in input_shape)
    if len(sp) != 3:
        raise ValueError(f"input_shape must be (D, H, W), got {input_shape}")
    div = model.config.spatial_divisor
    if any(d % div for d in sp):
        raise ValueError(f"input shape {sp} incompatible with the stride plan (divisor {div})")
    report = FlopReport()
    tracer = _Tracer(report)
    spatials = []
    cur = sp
    for i, stage in enumerate(model.stages):
        cur = tracer.module(f"stages.{i}", stage, cur)
        spatials.append(cur)
    for i, dec in enumerate(model.decoder):
        skip_sp = spatials[-2 - i]
        cur = tracer.decoder_stage(f"decoder.{i}", dec, cur, skip_sp)
    tracer.conv("head", model.head, cur)
    return report


def count_flops(model, input_shape):
    """Total GFLOPs of one forward pass at batch size 1 (see FLOP_CONVENTION)."""
    return flop_report(model, input_shape).gflops


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, extra=None, arrays=None):
    """Write a versioned checkpoint: magic, version byte, JSON header, raw blobs.

    ``extra`` is a JSON-serializable dict (training step, epoch, ...);
    ``arrays`` holds additional named float arrays (optimizer state) stored
    alongside parameters but not loaded into the model.
    """
    entries = []
    blobs = []
    for name, p in model.named_parameters():
        entries.append({"name": name, "kind": "param",
                        "dtype": str(p.data.dtype), "shape": list(p.data.shape)})
        blobs.append(np.ascontiguousarray(p.data))
    for name, b in model.named_buffers():
        entries.append({"name": name, "kind": "buffer",
                        "dtype": str(b.dtype), "shape": list(b.shape)})
        blobs.append(np.ascontiguousarray(b))
    for name, a in (arrays or {}).items():
        a = np.asarray(a)
        entries.append({"name": name, "kind": "extra",
                        "dtype": str(a.dtype), "shape": list(a.shape)})
        blobs.append(np.ascontiguousarray(a))
    header = {
        "config": asdict(model.config),
        "tensors": entries,
        "extra": extra or {},
    }
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for blob in blobs:
            if blob.dtype.byteorder == ">":
                blob = blob.astype(blob.dtype.newbyteorder("<"))
            f.write(blob.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, extra_dict, extra_arrays)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version = struct.unpack("<B", f.read(1))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        state = {}
        extra_arrays = {}
        for entry in header["tensors"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
            data = data.reshape(entry["shape"]).copy()
            if entry["kind"] == "extra":
                extra_arrays[entry["name"]] = data
            else:
                state[entry["name"]] = data
    config = ModelConfig(**header["config"])
    model = build(config, seed=0)
    model.load_state_dict(state)
    return model, header.get("extra", {}), extra_arrays
