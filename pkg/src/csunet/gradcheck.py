"""Central-difference gradient verification.

``grad_check`` compares reverse-mode gradients of a scalar-valued function
against central differences at step ``h`` on float64 inputs. The per
coordinate relative error is::

    |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)

and the check passes iff the maximum over probed coordinates is <= tol.
Large tensors may be probed on a seeded random subset of coordinates
(``max_coords``); each probe costs two forward evaluations.

``standard_battery`` runs the canonical list used by the ``gradcheck`` CLI
command: every primitive op in isolation (linear/conv/pool at the tighter
tolerance), every block, and a full tiny network. Each item appears exactly
once, named.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .blocks import DoubleConv, GatedSkipMiniU, MiniU, MiniUBlock, SqueezeExcite
from .losses import LossConfig, ce_loss, combined_loss, dice_loss
from .modules import ConvBNReLU, initialize
from .network import CSUNet3D, NetworkConfig
from .tensor import Tensor, concat, no_grad


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_coords: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tol


def grad_check(f, point, h=1e-4, tol=1e-4, max_coords=None, rng=None, name="grad_check"):
    """Verify reverse-mode gradients of ``f`` w.r.t. ``point``.

    ``f`` must rebuild its graph on every call and return a scalar Tensor;
    ``point`` must be float64 with requires_grad. ``point.data`` is mutated
    in place during probing and restored afterward.
    """
    if point.data.dtype != np.float64:
        raise ValueError("grad_check requires a float64 point")
    if not point.requires_grad:
        raise ValueError("grad_check point must require gradients")

    point.grad = None
    out = f(point)
    if out.size != 1:
        raise ValueError(f"grad_check function must return a scalar, got shape {out.shape}")
    out.backward()
    g_ad = np.zeros_like(point.data) if point.grad is None else point.grad.copy()

    n = point.data.size
    if max_coords is not None and max_coords < n:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)

    flat = point.data.reshape(-1)
    g_flat = g_ad.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            fp = f(point).item()
        flat[i] = orig - h
        with no_grad():
            fm = f(point).item()
        flat[i] = orig
        g_fd = (fp - fm) / (2.0 * h)
        rel = abs(g_flat[i] - g_fd) / max(1.0, abs(g_flat[i]), abs(g_fd))
        if rel > worst:
            worst = rel
    return GradCheckResult(name, worst, len(coords), tol)


def _projector(rng, shape):
    """Random fixed projection making the scalar sensitive to every output."""
    r = Tensor(rng.standard_normal(shape))

    def reduce(t):
        return (t * r).sum()

    return reduce


def _t(rng, shape, scale=1.0, shift=0.0):
    return Tensor(rng.standard_normal(shape) * scale + shift, requires_grad=True)


def standard_battery(tol=1e-4, tol_linear=1e-5, seed=0, include_network=True):
    """Run the full verification battery; returns a list of GradCheckResult."""
    rng = np.random.default_rng(seed)
    results = []

    def run(name, f, point, this_tol, max_coords=None, h=1e-4):
        results.append(
            grad_check(
                f, point, h=h, tol=this_tol, max_coords=max_coords, rng=np.random.default_rng(seed + 1), name=name
            )
        )

    # ---- primitive ops; the pure-linear ones get the tighter tolerance ----

    x = _t(rng, (3, 5))
    w = Tensor(rng.standard_normal((4, 5)))
    b = Tensor(rng.standard_normal(4))
    red = _projector(rng, (3, 4))
    run("linear/input", lambda p: red(F.linear(p, w, b)), x, tol_linear)

    xc = Tensor(rng.standard_normal((3, 5)))
    wv = _t(rng, (4, 5))
    run("linear/weight", lambda p: red(F.linear(xc, p, b)), wv, tol_linear)
    bv = _t(rng, (4,))
    run("linear/bias", lambda p: red(F.linear(xc, w, p)), bv, tol_linear)

    cx = _t(rng, (2, 3, 5, 5, 5))
    cw = Tensor(rng.standard_normal((4, 3, 3, 3, 3)) * 0.5)
    cb = Tensor(rng.standard_normal(4))
    cred = _projector(rng, (2, 4, 5, 5, 5))
    run("conv3d/input", lambda p: cred(F.conv3d(p, cw, cb, padding=1)), cx, tol_linear, max_coords=64)

    cxc = Tensor(rng.standard_normal((2, 3, 5, 5, 5)))
    cwv = _t(rng, (4, 3, 3, 3, 3), scale=0.5)
    run("conv3d/weight", lambda p: cred(F.conv3d(cxc, p, cb, padding=1)), cwv, tol_linear, max_coords=64)
    cbv = _t(rng, (4,))
    run("conv3d/bias", lambda p: cred(F.conv3d(cxc, cw, p, padding=1)), cbv, tol_linear)

    sx = _t(rng, (1, 2, 7, 7, 7))
    sw = Tensor(rng.standard_normal((3, 2, 2, 2, 2)) * 0.5)
    sred = _projector(rng, (1, 3, 4, 4, 4))
    run(
        "conv3d/strided_dilated",
        lambda p: sred(F.conv3d(p, sw, stride=2, padding=1, dilation=2)),
        sx,
        tol_linear,
        max_coords=64,
    )

    px = _t(rng, (2, 2, 4, 4, 4))
    pred_ = _projector(rng, (2, 2, 2, 2, 2))
    run("maxpool3d/input", lambda p: pred_(F.maxpool3d(p, 2)), px, tol_linear, max_coords=64)

    ox = _t(rng, (1, 2, 5, 5, 5))
    ored = _projector(rng, (1, 2, 4, 4, 4))
    run("maxpool3d/overlapping", lambda p: ored(F.maxpool3d(p, 2, stride=1)), ox, tol_linear, max_coords=64)

    for mode in ("nearest", "trilinear"):
        ux = _t(rng, (1, 2, 3, 3, 3))
        ured = _projector(rng, (1, 2, 6, 6, 6))
        run(f"upsample3d/{mode}", lambda p, m=mode: ured(F.upsample3d(p, m)), ux, tol)

    rx = _t(rng, (4, 4))
    rx.data += 0.3 * np.sign(rx.data)  # keep coordinates away from the kink
    rred = _projector(rng, (4, 4))
    run("relu", lambda p: rred(p.relu()), rx, tol)
    gx = _t(rng, (4, 4))
    run("sigmoid", lambda p: rred(p.sigmoid()), gx, tol)
    ex = _t(rng, (4, 4), scale=0.5)
    run("exp", lambda p: rred(p.exp()), ex, tol)
    lx = _t(rng, (4, 4), scale=0.2, shift=2.0)
    run("log", lambda p: rred(p.log()), lx, tol)

    kx = _t(rng, (5, 5), scale=2.0)
    kx.data += np.where(np.abs(np.abs(kx.data) - 1.0) < 0.05, 0.2, 0.0)  # avoid the clamp edges
    kred = _projector(rng, (5, 5))
    run("clamp", lambda p: kred(p.clamp(-1.0, 1.0)), kx, tol)

    ax = _t(rng, (3, 4))
    aa = Tensor(rng.standard_normal((3, 4)))
    ab = Tensor(rng.standard_normal((3, 4)) * 0.5 + 2.0)
    ared = _projector(rng, (3, 4))
    run("add_mul_div", lambda p: ared((p * aa + 1.5) / ab - p * 0.25), ax, tol)

    tx = _t(rng, (2, 3, 2, 2, 2))
    tother = Tensor(rng.standard_normal((2, 2, 2, 2, 2)))
    tred = _projector(rng, (2, 2, 2, 2, 2))
    run("concat_getitem", lambda p: tred(concat([p, tother], axis=1)[:, 1:3]), tx, tol)

    mx = _t(rng, (3, 4, 5))
    mred = _projector(rng, (4,))
    run("sum_mean", lambda p: mred(p.sum(axis=(0, 2)) * 0.5 + p.mean(axis=(0, 2))), mx, tol)

    fx = _t(rng, (2, 3, 2, 2, 2))
    fred = _projector(rng, (2, 3, 2, 2, 2))
    run("softmax_channels", lambda p: fred(F.softmax_channels(p)), fx, tol)

    vx = _t(rng, (2, 3, 3, 3, 3))
    vred = _projector(rng, (2, 3))
    run("global_avg_pool", lambda p: vred(F.global_avg_pool(p)), vx, tol)

    nx = _t(rng, (2, 3, 3, 3, 3))
    ngamma = Tensor(rng.standard_normal(3) * 0.2 + 1.0)
    nbeta = Tensor(rng.standard_normal(3) * 0.2)
    nred = _projector(rng, (2, 3, 3, 3, 3))

    def bn(p, gamma, beta):
        return nred(F.batch_norm3d(p, gamma, beta, np.zeros(3), np.ones(3), training=True))

    run("batch_norm3d/input", lambda p: bn(p, ngamma, nbeta), nx, tol)
    nxc = Tensor(rng.standard_normal((2, 3, 3, 3, 3)))
    ngv = _t(rng, (3,), scale=0.2, shift=1.0)
    run("batch_norm3d/gamma", lambda p: bn(nxc, p, nbeta), ngv, tol)
    run("instance_norm3d/input", lambda p: nred(F.instance_norm3d(p, ngamma, nbeta)), nx, tol)

    cex = _t(rng, (2, 2, 3, 3, 3))
    ce_labels = np.random.default_rng(seed + 2).integers(0, 2, (2, 3, 3, 3))
    ce_onehot = F.one_hot(ce_labels, 2, dtype=np.float64)
    run("ce_loss/logits", lambda p: ce_loss(p, ce_onehot), cex, tol)

    dx = _t(rng, (1, 2, 4, 4, 4))
    d_labels = np.random.default_rng(seed + 3).integers(0, 2, (1, 4, 4, 4))
    d_target = Tensor(F.one_hot(d_labels, 2, dtype=np.float64)[:, 1])
    run("dice_loss/logits", lambda p: dice_loss(F.softmax_channels(p)[:, 1], d_target), dx, tol)

    # ---- blocks: input plus one representative parameter each ----

    def block_item(name, module, cin, extent, param=None, batch=2):
        initialize(module, seed)
        module.train()
        bx = _t(rng, (batch, cin, extent, extent, extent), scale=0.8)
        with no_grad():
            out_shape = module(Tensor(bx.data.copy())).shape
        bred = _projector(rng, out_shape)
        run(f"{name}/input", lambda p: bred(module(p)), bx, tol, max_coords=48)
        if param is not None:
            pname, pt = param(module)
            const_in = Tensor(bx.data.copy())
            run(f"{name}/{pname}", lambda p: bred(module(const_in)), pt.value, tol, max_coords=24)

    block_item(
        "conv_bn_relu",
        ConvBNReLU(2, 3, dtype=np.float64),
        2,
        4,
        param=lambda m: ("conv_weight", m.conv.weight),
    )
    block_item(
        "squeeze_excite",
        SqueezeExcite(4, dtype=np.float64),
        4,
        3,
        param=lambda m: ("fc1_weight", m.fc1.weight),
    )
    block_item(
        "double_conv_channel_residual",
        DoubleConv(2, 3, wiring="channel_residual", dtype=np.float64),
        2,
        4,
        param=lambda m: ("gate_fc2_weight", m.gate.fc2.weight),
    )
    block_item(
        "mini_u_depth1",
        MiniU(2, 3, depth=1, dtype=np.float64),
        2,
        4,
        param=lambda m: ("conv_in_weight", m.conv_in.conv.weight),
    )
    block_item(
        "mini_u_depth2",
        MiniU(2, 3, depth=2, upsample_mode="trilinear", dtype=np.float64),
        2,
        4,
    )
    block_item(
        "mini_u_block_channel_residual",
        MiniUBlock(3, 3, wiring="channel_residual", dtype=np.float64),
        3,
        4,
        param=lambda m: ("gate_fc1_weight", m.gate.fc1.weight),
    )
    block_item(
        "gated_skip_mini_u",
        GatedSkipMiniU(3, dtype=np.float64),
        3,
        4,
        param=lambda m: ("fuse_conv_weight", m.fuse.conv.weight),
    )

    # ---- full tiny network ----

    if include_network:
        cfg = NetworkConfig(
            stage_channels=(4, 8, 16, 32),
            input_extent=16,
            variant="base_cr",
            upsample_mode="trilinear",
            norm_mode="batch",
            seed=seed,
        )
        net = CSUNet3D(cfg, dtype=np.float64)
        net.train()
        net_input = _t(rng, (1, 1, 16, 16, 16), scale=0.5)
        net_labels = np.random.default_rng(seed + 4).integers(0, 2, (1, 16, 16, 16))
        net_lcfg = LossConfig(ce_weight=0.3)

        def net_loss(_p):
            return combined_loss(net(net_input), net_labels, net_lcfg)

        # Deep-composition items use a smaller step: curvature through sixteen
        # normalized layers makes the h**2 truncation term visible at 1e-4.
        run("network/input", net_loss, net_input, tol, max_coords=24, h=1e-5)
        picks = [
            ("network/en1_conv_weight", net.en1.inner_u.conv_in.conv.weight),
            ("network/en3_gate_fc2_weight", net.en3.block.gate.fc2.weight),
            ("network/bottleneck_norm_gamma", net.bottleneck.cbr1.norm.gamma),
            ("network/de2_conv_weight", net.de2.block.body.conv_in.conv.weight),
            ("network/head_weight", net.head.weight),
            ("network/head_bias", net.head.bias),
        ]
        for pname, param in picks:
            run(pname, net_loss, param.value, tol, max_coords=10, h=1e-5)

    return results
