"""Network building blocks.

Two block families share one wiring axis:

* ``DoubleConv``: two stacked conv-norm-relu units.
* ``MiniUBlock``: a stage-internal mini U-structure (``MiniU``).

``wiring`` selects how the branch output reaches the block output:

* ``"plain"``              y = f(x)
* ``"residual"``           y = f(x) + proj(x)
* ``"channel_residual"``   y = gate(f(x)) + proj(x)

where ``gate`` is a squeeze-excitation channel gate and ``proj`` is the
identity when in/out widths match, else a 1x1x1 convolution. With the
branch's final conv zero-initialized and matching widths, both residual
wirings reduce to the bitwise identity (the gate multiplies an exact zero).

``GatedSkipMiniU`` is the bottleneck fusion block: a depth-1 mini-U branch
whose full-resolution skip passes through a channel gate before
concatenation and an output conv-norm-relu.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .modules import Conv3d, ConvBNReLU, Linear, Module
from .tensor import ShapeError, Tensor, _accum, concat

WIRINGS = ("plain", "residual", "channel_residual")


class SqueezeExcite(Module):
    """Channel gate: global average pool -> fc -> relu -> fc -> sigmoid -> scale.

    Hidden width is max(1, channels // reduction). Zero weights give a gate
    of exactly 0.5 per channel (sigmoid of 0).
    """

    def __init__(self, channels, reduction=4, dtype=np.float32):
        super().__init__()
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, dtype=dtype)
        self.fc2 = Linear(hidden, channels, dtype=dtype)

    def gate(self, x):
        """Per-channel gate values in (0, 1), shape (N, C)."""
        s = F.global_avg_pool(x)
        return self.fc2(self.fc1(s).relu()).sigmoid()

    def forward(self, x):
        n, c = x.shape[:2]
        if c != self.channels:
            raise ShapeError(f"channel gate built for {self.channels} channels, got {c}")
        return x * self.gate(x).reshape((n, c, 1, 1, 1))


def _make_proj(cin, cout, wiring, dtype):
    if wiring == "plain" or cin == cout:
        return None
    return Conv3d(cin, cout, kernel=1, dtype=dtype)


class DoubleConv(Module):
    """Two stacked conv-norm-relu units with the wiring axis on top."""

    def __init__(self, cin, cout, mid=None, wiring="plain", norm_mode="batch", reduction=4, dtype=np.float32):
        super().__init__()
        if wiring not in WIRINGS:
            raise ValueError(f"unknown wiring {wiring!r}")
        mid = cout if mid is None else mid
        self.wiring = wiring
        self.cbr1 = ConvBNReLU(cin, mid, norm_mode, dtype)
        self.cbr2 = ConvBNReLU(mid, cout, norm_mode, dtype)
        if wiring == "channel_residual":
            self.gate = SqueezeExcite(cout, reduction, dtype)
        self.proj = _make_proj(cin, cout, wiring, dtype)

    def branch(self, x):
        return self.cbr2(self.cbr1(x))

    def forward(self, x):
        y = self.branch(x)
        if self.wiring == "plain":
            return y
        if self.wiring == "channel_residual":
            y = self.gate(y)
        skip = x if self.proj is None else self.proj(x)
        return y + skip


class MiniU(Module):
    """Stage-internal mini U-structure.

    An entry conv sets the output width at full resolution, ``depth`` levels
    of {pool 2x2x2 -> conv-norm-relu} narrow to ``mid`` channels, and
    symmetric {upsample -> concat level skip -> conv-norm-relu} levels
    restore resolution. Output extent equals input extent; spatial extents
    must be divisible by 2**depth.
    """

    def __init__(self, cin, cout, mid=None, depth=1, norm_mode="batch", upsample_mode="nearest", dtype=np.float32):
        super().__init__()
        if depth < 1:
            raise ValueError(f"mini-U depth must be >= 1, got {depth}")
        mid = max(1, cout // 2) if mid is None else mid
        self.depth = depth
        self.upsample_mode = upsample_mode
        self.conv_in = ConvBNReLU(cin, cout, norm_mode, dtype)
        self.down = [ConvBNReLU(cout if i == 0 else mid, mid, norm_mode, dtype) for i in range(depth)]
        # up[0] restores the output width at full resolution; deeper levels stay at mid
        self.up = [
            ConvBNReLU(mid + (cout if i == 0 else mid), cout if i == 0 else mid, norm_mode, dtype)
            for i in range(depth)
        ]

    def forward(self, x):
        ext = x.shape[2:]
        if any(e % (1 << self.depth) for e in ext):
            raise ShapeError(f"mini-U of depth {self.depth} needs extents divisible by {1 << self.depth}, got {ext}")
        top = self.conv_in(x)
        skips = [top]
        y = top
        for cbr in self.down:
            y = cbr(F.maxpool3d(y, 2))
            skips.append(y)
        skips.pop()  # bottom level has no skip into itself
        for i in range(self.depth - 1, -1, -1):
            y = self.up[i](concat([F.upsample3d(y, self.upsample_mode), skips[i]], axis=1))
        return y


class MiniUBlock(Module):
    """Mini-U branch with the wiring axis: y = [gate](miniU(x)) + [proj(x)]."""

    def __init__(
        self,
        cin,
        cout,
        mid=None,
        depth=1,
        wiring="plain",
        norm_mode="batch",
        upsample_mode="nearest",
        reduction=4,
        dtype=np.float32,
    ):
        super().__init__()
        if wiring not in WIRINGS:
            raise ValueError(f"unknown wiring {wiring!r}")
        self.wiring = wiring
        self.body = MiniU(cin, cout, mid, depth, norm_mode, upsample_mode, dtype)
        if wiring == "channel_residual":
            self.gate = SqueezeExcite(cout, reduction, dtype)
        self.proj = _make_proj(cin, cout, wiring, dtype)

    def forward(self, x):
        y = self.body(x)
        if self.wiring == "plain":
            return y
        if self.wiring == "channel_residual":
            y = self.gate(y)
        skip = x if self.proj is None else self.proj(x)
        return y + skip


class GatedSkipMiniU(Module):
    """Bottleneck fusion: gated full-res skip + pooled conv branch, fused.

    forward(x) = fuse(concat(gate(x), upsample(conv(pool(x))))) where fuse is
    a conv-norm-relu taking 2C -> C. Shape preserving; extents must be >= 2.
    Odd extents are padded to even before pooling and the branch is cropped
    back after upsampling.
    """

    def __init__(self, channels, norm_mode="batch", upsample_mode="nearest", reduction=4, dtype=np.float32):
        super().__init__()
        self.upsample_mode = upsample_mode
        self.gate = SqueezeExcite(channels, reduction, dtype)
        self.branch = ConvBNReLU(channels, channels, norm_mode, dtype)
        self.fuse = ConvBNReLU(2 * channels, channels, norm_mode, dtype)

    def forward(self, x):
        d, h, w = x.shape[2:]
        if min(d, h, w) < 2:
            raise ShapeError(f"gated-skip mini-U needs spatial extents >= 2, got {x.shape[2:]}")
        skip = self.gate(x)
        y = x
        pads = [(0, e % 2) for e in (d, h, w)]
        if any(p[1] for p in pads):
            y = _zero_pad_tail(y, pads)
        y = F.upsample3d(self.branch(F.maxpool3d(y, 2)), self.upsample_mode)
        if y.shape[2:] != (d, h, w):
            y = y[:, :, :d, :h, :w]
        return self.fuse(concat([skip, y], axis=1))


def _zero_pad_tail(x, pads):
    """Zero-pad the trailing side of the three spatial axes of a 5D tensor."""
    padded_shape = x.shape[:2] + tuple(e + p[1] for e, p in zip(x.shape[2:], pads))
    data = np.zeros(padded_shape, dtype=x.dtype)
    d, h, w = x.shape[2:]
    data[:, :, :d, :h, :w] = x.data

    def bw(g):
        _accum(x, np.ascontiguousarray(g[:, :, :d, :h, :w]))

    return Tensor._from_op(data, (x,), bw, "zero_pad")
