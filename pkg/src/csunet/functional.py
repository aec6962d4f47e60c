"""Differentiable volumetric ops: convolution, pooling, upsampling, norms.

Volumes are (N, C, D, H, W). conv3d is cross-correlation (no kernel flip)
with zero padding; output extent per axis is::

    out = floor((in + 2*pad - dilation*(k - 1) - 1) / stride) + 1

The forward path vectorizes through strided window views and BLAS-backed
``np.tensordot``; the independent nested-loop oracle used to verify it lives
in the test suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _accum

_AXIS_NAMES = ("depth", "height", "width")


def _triple(v, name):
    if isinstance(v, (int, np.integer)):
        v = (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ShapeError(f"{name} must be an int or a triple, got {v!r}")
    return v


def conv3d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """3D cross-correlation.

    Parameters
    ----------
    x : Tensor (N, Cin, D, H, W)
    weight : Tensor (Cout, Cin, kd, kh, kw)
    bias : Tensor (Cout,) or None
    stride, padding, dilation : int or triple, per spatial axis
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be 5D (N,C,D,H,W), got {x.shape}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d weight must be 5D (Cout,Cin,k,k,k), got {weight.shape}")
    sd, sh, sw = _triple(stride, "stride")
    pd, ph, pw = _triple(padding, "padding")
    dd, dh, dw = _triple(dilation, "dilation")
    if min(sd, sh, sw) < 1 or min(dd, dh, dw) < 1 or min(pd, ph, pw) < 0:
        raise ShapeError("stride/dilation must be >= 1 and padding >= 0")

    n, cin, *extents = x.shape
    cout, cin_w, *kernel = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d channel mismatch: input has {cin}, weight expects {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d bias must have shape ({cout},), got {bias.shape}")

    strides = (sd, sh, sw)
    pads = (pd, ph, pw)
    dils = (dd, dh, dw)
    out_extents = []
    for ax in range(3):
        num = extents[ax] + 2 * pads[ax] - dils[ax] * (kernel[ax] - 1) - 1
        out = num // strides[ax] + 1
        if out < 1:
            raise ShapeError(
                f"conv3d produces non-positive output extent on the {_AXIS_NAMES[ax]} axis: "
                f"input {extents[ax]}, kernel {kernel[ax]}, stride {strides[ax]}, "
                f"padding {pads[ax]}, dilation {dils[ax]}"
            )
        out_extents.append(out)
    do, ho, wo = out_extents
    kd, kh, kw = kernel

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    span = tuple(dils[ax] * (kernel[ax] - 1) + 1 for ax in range(3))
    win = sliding_window_view(xp, span, axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    if dils != (1, 1, 1):
        win = win[..., ::dd, ::dh, ::dw]
    # win: (N, Cin, Do, Ho, Wo, kd, kh, kw), a view into xp
    out = np.tensordot(win, weight.data, axes=((1, 5, 6, 7), (1, 2, 3, 4)))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def bw(g):
        if weight.requires_grad:
            dw_ = np.tensordot(g, win, axes=((0, 2, 3, 4), (0, 2, 3, 4)))
            _accum(weight, np.ascontiguousarray(dw_))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for a in range(kd):
                za = a * dd
                for b in range(kh):
                    zb = b * dh
                    for c in range(kw):
                        zc = c * dw
                        contrib = np.tensordot(g, weight.data[:, :, a, b, c], axes=([1], [0]))
                        dxp[
                            :,
                            :,
                            za : za + sd * (do - 1) + 1 : sd,
                            zb : zb + sh * (ho - 1) + 1 : sh,
                            zc : zc + sw * (wo - 1) + 1 : sw,
                        ] += np.moveaxis(contrib, -1, 1)
            dx = dxp[
                :,
                :,
                pd : pd + extents[0],
                ph : ph + extents[1],
                pw : pw + extents[2],
            ]
            _accum(x, np.ascontiguousarray(dx))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw, "conv3d")


def maxpool3d(x, kernel, stride=None):
    """Max pooling with floor remainder handling (trailing voxels dropped).

    Ties within a window break to the first position in (d, h, w) scan
    order, matching a direct window scan.
    """
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d input must be 5D, got {x.shape}")
    kd, kh, kw = _triple(kernel, "kernel")
    sd, sh, sw = _triple(stride if stride is not None else (kd, kh, kw), "stride")
    n, c, d, h, w = x.shape
    for ax, (ext, k) in enumerate(zip((d, h, w), (kd, kh, kw))):
        if k > ext:
            raise ShapeError(f"maxpool3d kernel {k} exceeds input extent {ext} on the {_AXIS_NAMES[ax]} axis")
    if min(sd, sh, sw) < 1:
        raise ShapeError("maxpool3d stride must be >= 1")
    do = (d - kd) // sd + 1
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    kvol = kd * kh * kw

    if (kd, kh, kw) == (sd, sh, sw):
        # non-overlapping windows: pure reshape, no scatter needed
        dc, hc, wc = do * kd, ho * kh, wo * kw
        xc = x.data[:, :, :dc, :hc, :wc]
        blocks = xc.reshape(n, c, do, kd, ho, kh, wo, kw).transpose(0, 1, 2, 4, 6, 3, 5, 7)
        flat = np.ascontiguousarray(blocks).reshape(n, c, do, ho, wo, kvol)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gflat = np.zeros((n, c, do, ho, wo, kvol), dtype=g.dtype)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            gx = gflat.reshape(n, c, do, ho, wo, kd, kh, kw).transpose(0, 1, 2, 5, 3, 6, 4, 7)
            gx = np.ascontiguousarray(gx).reshape(n, c, dc, hc, wc)
            if (dc, hc, wc) != (d, h, w):
                full = np.zeros_like(x.data)
                full[:, :, :dc, :hc, :wc] = gx
                gx = full
            _accum(x, gx)

        return Tensor._from_op(np.ascontiguousarray(out), (x,), bw, "maxpool3d")

    win = sliding_window_view(x.data, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    flat = np.ascontiguousarray(win).reshape(n, c, do, ho, wo, kvol)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        nn, cc, zd, zh, zw = np.indices((n, c, do, ho, wo), sparse=False)
        od = idx // (kh * kw)
        oh = (idx // kw) % kh
        ow = idx % kw
        gx = np.zeros_like(x.data)
        np.add.at(gx, (nn, cc, zd * sd + od, zh * sh + oh, zw * sw + ow), g)
        _accum(x, gx)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bw, "maxpool3d")


_matrix_cache = {}


def _interp_matrix(n_in, mode, dtype):
    """(2n, n) one-axis upsampling matrix for factor 2."""
    key = (n_in, mode, np.dtype(dtype).str)
    m = _matrix_cache.get(key)
    if m is not None:
        return m
    m = np.zeros((2 * n_in, n_in), dtype=dtype)
    if mode == "nearest":
        for o in range(2 * n_in):
            m[o, o // 2] = 1.0
    else:  # trilinear, align_corners=False, edge-clamped
        for o in range(2 * n_in):
            s = (o + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(s))
            t = s - i0
            lo = min(max(i0, 0), n_in - 1)
            hi = min(max(i0 + 1, 0), n_in - 1)
            m[o, lo] += 1.0 - t
            m[o, hi] += t
    _matrix_cache[key] = m
    return m


def upsample3d(x, mode="nearest"):
    """Double every spatial extent; ``mode`` is "nearest" or "trilinear".

    Trilinear uses align_corners=False sample positions with edge clamping,
    applied separably per axis. Both modes are linear maps, so the backward
    pass is the transposed matrix applied the same way.
    """
    if x.ndim != 5:
        raise ShapeError(f"upsample3d input must be 5D, got {x.shape}")
    if mode not in ("nearest", "trilinear"):
        raise ShapeError(f"unknown upsample mode {mode!r}")
    mats = [_interp_matrix(x.shape[2 + i], mode, x.dtype) for i in range(3)]

    def apply(arr, forward):
        for ax, m in zip((2, 3, 4), mats):
            arr = np.moveaxis(np.tensordot(arr, m, axes=([ax], [1 if forward else 0])), -1, ax)
        return np.ascontiguousarray(arr)

    out = apply(x.data, forward=True)

    def bw(g):
        _accum(x, apply(g, forward=False))

    return Tensor._from_op(out, (x,), bw, "upsample3d")


def linear(x, weight, bias=None):
    """Affine map: y = x @ weight.T + bias, x is (N, Fin), weight (Fout, Fin)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear feature mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out = out + bias.data

    def bw(g):
        if x.requires_grad:
            _accum(x, np.ascontiguousarray(g @ weight.data))
        if weight.requires_grad:
            _accum(weight, np.ascontiguousarray(g.T @ x.data))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(np.ascontiguousarray(out), parents, bw, "linear")


def global_avg_pool(x):
    """(N, C, D, H, W) -> (N, C) spatial mean."""
    if x.ndim != 5:
        raise ShapeError(f"global_avg_pool input must be 5D, got {x.shape}")
    return x.mean(axis=(2, 3, 4))


def softmax_channels(x):
    """Channel-axis softmax of (N, C, ...) logits, max-subtraction stabilized."""
    if x.ndim < 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs a channel axis with C >= 2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))

    return Tensor._from_op(y, (x,), bw, "softmax_channels")


def batch_norm3d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Normalize over (N, D, H, W) per channel.

    Train mode uses (and differentiates through) batch statistics and
    updates the running buffers in place with ``momentum``; eval mode is a
    pure function of the running buffers. Biased (population) variance
    throughout.
    """
    c = x.shape[1]
    shape = (1, c, 1, 1, 1)
    if training:
        mu = x.mean(axis=(0, 2, 3, 4), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(0, 2, 3, 4), keepdims=True)
        running_mean += momentum * (mu.data.reshape(c) - running_mean)
        running_var += momentum * (var.data.reshape(c) - running_var)
    else:
        mu = Tensor(running_mean.reshape(shape).astype(x.dtype))
        centered = x - mu
        var = Tensor(running_var.reshape(shape).astype(x.dtype))
    xhat = centered / (var + eps).sqrt()
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


def instance_norm3d(x, gamma, beta, eps=1e-5):
    """Normalize over (D, H, W) per sample and channel; no running state."""
    c = x.shape[1]
    shape = (1, c, 1, 1, 1)
    mu = x.mean(axis=(2, 3, 4), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(2, 3, 4), keepdims=True)
    xhat = centered / (var + eps).sqrt()
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


def one_hot(labels, num_classes, dtype=np.float32):
    """Integer label volume (N, D, H, W) -> one-hot (N, C, D, H, W) ndarray."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels out of range [0, {num_classes}): got [{labels.min()}, {labels.max()}]")
    eye = np.eye(num_classes, dtype=dtype)
    return np.ascontiguousarray(np.moveaxis(eye[labels], -1, 1))
