"""Layer infrastructure: parameters, buffers, module tree, basic layers.

Modules discover their parameters and buffers by walking ``__dict__`` in
attribute insertion order, which is fixed by construction order, so registry
names ("en1.inner_u.conv_in.weight", ...) are stable across runs. Plain
lists of modules are walked with index suffixes.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter:
    """Trainable array; gradients accumulate on ``value.grad``."""

    __slots__ = ("value",)

    def __init__(self, data):
        self.value = Tensor(np.ascontiguousarray(data), requires_grad=True)

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    @property
    def shape(self):
        return self.value.data.shape

    def zero_grad(self):
        self.value.grad = None

    def assign(self, array):
        array = np.asarray(array)
        if array.shape != self.value.data.shape:
            raise ValueError(f"cannot assign shape {array.shape} to parameter of shape {self.value.data.shape}")
        np.copyto(self.value.data, array.astype(self.value.data.dtype, copy=False))


class Buffer:
    """Non-trainable persistent state (running statistics)."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.ascontiguousarray(data)

    def assign(self, array):
        array = np.asarray(array)
        if array.shape != self.data.shape:
            raise ValueError(f"cannot assign shape {array.shape} to buffer of shape {self.data.shape}")
        np.copyto(self.data, array.astype(self.data.dtype, copy=False))


class Module:
    """Base class for layers and blocks; see module docstring for the walk."""

    def __init__(self):
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _entries(self):
        for name, attr in self.__dict__.items():
            if name == "training":
                continue
            if isinstance(attr, (Parameter, Buffer, Module)):
                yield name, attr
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, (Parameter, Buffer, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, attr in self._entries():
            path = f"{prefix}{name}"
            if isinstance(attr, Parameter):
                yield path, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(prefix=f"{path}.")

    def named_buffers(self, prefix=""):
        for name, attr in self._entries():
            path = f"{prefix}{name}"
            if isinstance(attr, Buffer):
                yield path, attr
            elif isinstance(attr, Module):
                yield from attr.named_buffers(prefix=f"{path}.")

    def named_state(self, prefix=""):
        """Parameters and buffers interleaved in walk order (checkpoint order)."""
        for name, attr in self._entries():
            path = f"{prefix}{name}"
            if isinstance(attr, Parameter):
                yield path, attr.value.data
            elif isinstance(attr, Buffer):
                yield path, attr.data
            elif isinstance(attr, Module):
                yield from attr.named_state(prefix=f"{path}.")

    def submodules(self):
        yield self
        for _, attr in self._entries():
            if isinstance(attr, Module):
                yield from attr.submodules()

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def train(self):
        for m in self.submodules():
            m.training = True
        return self

    def eval(self):
        for m in self.submodules():
            m.training = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: arr.copy() for name, arr in self.named_state()}

    def load_state_dict(self, state):
        entries = dict(self.named_state())
        missing = sorted(set(entries) - set(state))
        unexpected = sorted(set(state) - set(entries))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
        for name, arr in entries.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"state entry {name!r} has shape {src.shape}, expected {arr.shape}")
            np.copyto(arr, src.astype(arr.dtype, copy=False))


def initialize(module, seed):
    """Deterministically initialize all layers in walk order from one seed."""
    rng = np.random.default_rng(seed)
    for m in module.submodules():
        reset = getattr(m, "reset", None)
        if reset is not None:
            reset(rng)
    return module


class Conv3d(Module):
    def __init__(self, cin, cout, kernel=3, stride=1, padding=0, dilation=1, bias=True, dtype=np.float32):
        super().__init__()
        self.cin = cin
        self.cout = cout
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        k = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        self.weight = Parameter(np.zeros((cout, cin) + k, dtype=dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def reset(self, rng):
        fan_in = int(np.prod(self.weight.shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        self.weight.assign(rng.standard_normal(self.weight.shape) * std)
        if self.bias is not None:
            self.bias.assign(np.zeros(self.bias.shape))

    def forward(self, x):
        b = self.bias.value if self.bias is not None else None
        return F.conv3d(x, self.weight.value, b, stride=self.stride, padding=self.padding, dilation=self.dilation)


class Linear(Module):
    def __init__(self, fin, fout, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(np.zeros((fout, fin), dtype=dtype))
        self.bias = Parameter(np.zeros(fout, dtype=dtype))

    def reset(self, rng):
        std = np.sqrt(2.0 / self.weight.shape[1])
        self.weight.assign(rng.standard_normal(self.weight.shape) * std)
        self.bias.assign(np.zeros(self.bias.shape))

    def forward(self, x):
        return F.linear(x, self.weight.value, self.bias.value)


class BatchNorm3d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = Buffer(np.zeros(channels, dtype=dtype))
        self.running_var = Buffer(np.ones(channels, dtype=dtype))

    def reset(self, rng):
        self.gamma.assign(np.ones(self.gamma.shape))
        self.beta.assign(np.zeros(self.beta.shape))
        self.running_mean.assign(np.zeros(self.gamma.shape))
        self.running_var.assign(np.ones(self.gamma.shape))

    def forward(self, x):
        return F.batch_norm3d(
            x,
            self.gamma.value,
            self.beta.value,
            self.running_mean.data,
            self.running_var.data,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class InstanceNorm3d(Module):
    def __init__(self, channels, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def reset(self, rng):
        self.gamma.assign(np.ones(self.gamma.shape))
        self.beta.assign(np.zeros(self.beta.shape))

    def forward(self, x):
        return F.instance_norm3d(x, self.gamma.value, self.beta.value, eps=self.eps)


def make_norm(mode, channels, dtype):
    if mode == "batch":
        return BatchNorm3d(channels, dtype=dtype)
    if mode == "instance":
        return InstanceNorm3d(channels, dtype=dtype)
    raise ValueError(f"unknown norm mode {mode!r}")


class ConvBNReLU(Module):
    """conv(k3, pad 1) -> norm -> relu; the basic building unit everywhere."""

    def __init__(self, cin, cout, norm_mode="batch", dtype=np.float32):
        super().__init__()
        self.conv = Conv3d(cin, cout, kernel=3, padding=1, dtype=dtype)
        self.norm = make_norm(norm_mode, cout, dtype)

    def forward(self, x):
        return self.norm(self.conv(x)).relu()
