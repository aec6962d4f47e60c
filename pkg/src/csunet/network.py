"""Encoder-decoder segmentation network over the block library.

Four encoder stages (each followed by 2x2x2 max pooling), a bottleneck, and
four mirrored decoder stages (upsample, concatenate the encoder skip, then
the stage blocks), closed by a 1x1x1 conv producing per-class logits.
Softmax is applied only inside losses/metrics, never here.

``variant`` selects the preset composition:

=========  ====================================  ==============================
variant    encoder/decoder stage                 bottleneck
=========  ====================================  ==============================
unet       plain double conv                     plain double conv
resunet    residual double conv                  residual double conv
base_u     mini-U + plain mini-U block           plain double conv + gated fusion
base_res   mini-U + residual mini-U block        residual double conv + gated fusion
base_cr    mini-U + channel-residual mini-U      channel-residual double conv + gated fusion
=========  ====================================  ==============================

The three base_* rows share every branch shape, so their parameter counts
differ exactly by the gate (and, where widths change, projection)
parameters, which is the intended ablation axis.

The gated fusion block requires a bottleneck extent of at least 2; for a
16-voxel input (verification scale, bottleneck extent 1) it is omitted and
the bottleneck keeps only its double-conv block.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .blocks import DoubleConv, GatedSkipMiniU, MiniU, MiniUBlock, SqueezeExcite
from .modules import Conv3d, Module, initialize
from .tensor import ShapeError, concat

VARIANTS = ("unet", "resunet", "base_u", "base_res", "base_cr")
UPSAMPLE_MODES = ("nearest", "trilinear")
NORM_MODES = ("batch", "instance")

_PRESET_WIRING = {
    "unet": "plain",
    "resunet": "residual",
    "base_u": "plain",
    "base_res": "residual",
    "base_cr": "channel_residual",
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 2
    stage_channels: tuple = (32, 64, 128, 256)
    input_extent: int = 64
    variant: str = "base_cr"
    upsample_mode: str = "trilinear"
    norm_mode: str = "batch"
    se_reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)

    def validate(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be 4 positive widths, got {self.stage_channels}")
        if self.input_extent < 16 or self.input_extent % 16:
            raise ConfigError(f"input_extent must be a multiple of 16 (>= 16), got {self.input_extent}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample_mode must be one of {UPSAMPLE_MODES}, got {self.upsample_mode!r}")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}, got {self.norm_mode!r}")
        if self.se_reduction < 1:
            raise ConfigError(f"se_reduction must be >= 1, got {self.se_reduction}")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError(f"network config must be an object, got {type(d).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown network config keys: {unknown}")
        return cls(**d).validate()

    def stage_depths(self):
        """Mini-U nesting depth per stage: 2 while the stage extent is >= 32."""
        return tuple(2 if (self.input_extent >> i) >= 32 else 1 for i in range(4))


class Stage(Module):
    """One encoder/decoder stage: optional stage-internal mini-U, then the
    preset's mixing block. Output width is the stage width either way."""

    def __init__(self, cin, cout, use_inner, wiring, depth, norm_mode, upsample_mode, reduction, dtype):
        super().__init__()
        self.uses_inner = use_inner
        if use_inner:
            self.inner_u = MiniU(cin, cout, depth=depth, norm_mode=norm_mode, upsample_mode=upsample_mode, dtype=dtype)
            self.block = MiniUBlock(
                cout,
                cout,
                depth=depth,
                wiring=wiring,
                norm_mode=norm_mode,
                upsample_mode=upsample_mode,
                reduction=reduction,
                dtype=dtype,
            )
        else:
            self.block = DoubleConv(cin, cout, wiring=wiring, norm_mode=norm_mode, reduction=reduction, dtype=dtype)

    def forward(self, x):
        if self.uses_inner:
            x = self.inner_u(x)
        return self.block(x)


class CSUNet3D(Module):
    """The full segmentation network; see module docstring for the layout."""

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        wiring = _PRESET_WIRING[config.variant]
        use_inner = config.variant in ("base_u", "base_res", "base_cr")
        chans = config.stage_channels
        depths = config.stage_depths()
        kw = dict(
            norm_mode=config.norm_mode,
            upsample_mode=config.upsample_mode,
            reduction=config.se_reduction,
            dtype=dtype,
        )

        enc_in = (config.in_channels, chans[0], chans[1], chans[2])
        self.en1 = Stage(enc_in[0], chans[0], use_inner, wiring, depths[0], **kw)
        self.en2 = Stage(enc_in[1], chans[1], use_inner, wiring, depths[1], **kw)
        self.en3 = Stage(enc_in[2], chans[2], use_inner, wiring, depths[2], **kw)
        self.en4 = Stage(enc_in[3], chans[3], use_inner, wiring, depths[3], **kw)

        self.bottleneck = DoubleConv(
            chans[3], chans[3], wiring=wiring, norm_mode=config.norm_mode, reduction=config.se_reduction, dtype=dtype
        )
        bottleneck_extent = config.input_extent // 16
        if use_inner and bottleneck_extent >= 2:
            self.fusion = GatedSkipMiniU(
                chans[3],
                norm_mode=config.norm_mode,
                upsample_mode=config.upsample_mode,
                reduction=config.se_reduction,
                dtype=dtype,
            )
        else:
            self.fusion = None

        # decoder stage i input = encoder i skip + the stage below's output
        self.de4 = Stage(chans[3] + chans[3], chans[3], use_inner, wiring, depths[3], **kw)
        self.de3 = Stage(chans[3] + chans[2], chans[2], use_inner, wiring, depths[2], **kw)
        self.de2 = Stage(chans[2] + chans[1], chans[1], use_inner, wiring, depths[1], **kw)
        self.de1 = Stage(chans[1] + chans[0], chans[0], use_inner, wiring, depths[0], **kw)

        self.head = Conv3d(chans[0], config.num_classes, kernel=1, dtype=dtype)
        initialize(self, config.seed)

    # ------------------------------------------------------------------

    def _check_input(self, x):
        cfg = self.config
        if x.ndim != 5:
            raise ShapeError(f"network input must be (N, C, D, H, W), got {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise ShapeError(f"network built for {cfg.in_channels} input channels, got {x.shape[1]}")
        e = cfg.input_extent
        if x.shape[2:] != (e, e, e):
            raise ShapeError(f"network built for cubic extent {e}, got spatial shape {x.shape[2:]}")

    def forward(self, x, record=None):
        """Return per-class logits (N, num_classes, D, H, W).

        If ``record`` is a dict it is filled with stage-name -> output shape
        for shape tracing.
        """
        self._check_input(x)
        mode = self.config.upsample_mode

        def note(name, t):
            if record is not None:
                record[name] = tuple(t.shape)

        skips = []
        y = x
        for name, st in (("en1", self.en1), ("en2", self.en2), ("en3", self.en3), ("en4", self.en4)):
            y = st(y)
            note(name, y)
            skips.append(y)
            y = F.maxpool3d(y, 2)
        y = self.bottleneck(y)
        if self.fusion is not None:
            y = self.fusion(y)
        note("bottleneck", y)
        for name, st, skip in (
            ("de4", self.de4, skips[3]),
            ("de3", self.de3, skips[2]),
            ("de2", self.de2, skips[1]),
            ("de1", self.de1, skips[0]),
        ):
            y = concat([F.upsample3d(y, mode), skip], axis=1)
            y = st(y)
            note(name, y)
        y = self.head(y)
        note("head", y)
        return y

    # ------------------------------------------------------------------

    def registry(self):
        """Ordered name -> Parameter map (trainable entries only)."""
        return dict(self.named_parameters())

    def parameter_count(self):
        return int(sum(p.value.data.size for p in self.parameters()))

    def structure(self):
        """Architecture introspection: counts of the distinguishing elements."""
        gates = 0
        residual_additions = 0
        mini_u = 0
        for m in self.submodules():
            if isinstance(m, SqueezeExcite):
                gates += 1
            if isinstance(m, MiniU):
                mini_u += 1
            if isinstance(m, (DoubleConv, MiniUBlock)) and m.wiring in ("residual", "channel_residual"):
                residual_additions += 1
        return {"channel_gates": gates, "residual_additions": residual_additions, "mini_u_blocks": mini_u}

    def summary(self):
        """Closed-form stage table: (name, in_channels, out_channels, extent)."""
        cfg = self.config
        chans = cfg.stage_channels
        e = cfg.input_extent
        rows = []
        enc_in = (cfg.in_channels, chans[0], chans[1], chans[2])
        for i in range(4):
            rows.append((f"en{i + 1}", enc_in[i], chans[i], e >> i))
        rows.append(("bottleneck", chans[3], chans[3], e >> 4))
        for i in range(3, -1, -1):
            below = chans[3] if i == 3 else chans[i + 1]
            rows.append((f"de{i + 1}", chans[i] + below, chans[i], e >> i))
        rows.append(("head", chans[0], cfg.num_classes, e))
        return rows


def build_network(config: NetworkConfig, dtype=np.float32) -> CSUNet3D:
    """Construct and deterministically initialize a network from config."""
    return CSUNet3D(config, dtype=dtype)
