"""Parameter-holding layers on top of :mod:`clinix.ops`.

:class:`Module` keeps an ordered registry of parameters and child modules
so that a whole network can enumerate, replace and serialize its tensors
under stable dotted names. Tensors are never mutated; optimizers hand back
new tensors through :meth:`Module.set_parameters`.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeError
from .ops import Conv3dSpec, NormSpec, RunningStats
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_param(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def named_parameters(self, prefix: str = ""):
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def named_buffers(self, prefix: str = ""):
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def set_parameters(self, values: dict):
        """Replace parameters by dotted name; arrays are wrapped as new leaves."""
        for name, v in values.items():
            owner, leaf = self._resolve(name)
            old = owner._params[leaf]
            arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
            if arr.shape != old.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != {old.shape}")
            owner._params[leaf] = Tensor(arr, requires_grad=True, name=leaf)

    def bind_parameters(self, tensors: dict):
        """Install the given tensor objects as parameters (no copy, no new leaves)."""
        for name, t in tensors.items():
            owner, leaf = self._resolve(name)
            if t.shape != owner._params[leaf].shape:
                raise ShapeError(f"parameter {name}: shape {t.shape} != {owner._params[leaf].shape}")
            owner._params[leaf] = t

    def set_buffers(self, values: dict):
        for name, v in values.items():
            owner, leaf = self._resolve(name)
            owner.load_buffer(leaf, np.asarray(v, dtype=np.float64))

    def load_buffer(self, leaf, value):
        raise KeyError(leaf)

    def _resolve(self, name):
        parts = name.split(".")
        owner = self
        for p in parts[:-1]:
            owner = owner._children[p]
        return owner, parts[-1]

    def train(self):
        for m in self.modules():
            object.__setattr__(m, "training", True)
        return self

    def eval(self):
        for m in self.modules():
            object.__setattr__(m, "training", False)
        return self

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


class Conv3d(Module):
    def __init__(self, spec: Conv3dSpec, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False):
        super().__init__()
        self.spec = spec
        shape = spec.weight_shape
        fan_in = int(np.prod(shape[1:]))
        self.add_param("weight", np.zeros(shape) if zero_init else he_normal(rng, shape, fan_in))
        self.has_bias = bias
        if bias:
            self.add_param("bias", np.zeros(spec.out_channels))

    def __call__(self, x):
        b = self.param("bias") if self.has_bias else None
        return ops.conv3d(x, self.spec, self.param("weight"), b)


def pointwise(cin, cout, rng, bias=True, zero_init=False) -> Conv3d:
    return Conv3d(Conv3dSpec(cin, cout, 1, 1, 0), rng, bias=bias, zero_init=zero_init)


def conv3x3(cin, cout, rng, bias=False) -> Conv3d:
    return Conv3d(Conv3dSpec(cin, cout, 3, 1, 1), rng, bias=bias)


class Downsample(Module):
    """Strided conv with kernel == stride; stride 1 degenerates to a 1x1x1 conv."""

    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.stride = tuple(stride)
        shape = (cout, cin) + self.stride
        self.add_param("weight", he_normal(rng, shape, cin * int(np.prod(self.stride))))
        self.add_param("bias", np.zeros(cout))

    def __call__(self, x):
        return ops.downsample(x, self.stride, self.param("weight"), self.param("bias"))


class Upsample(Module):
    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.stride = tuple(stride)
        self.add_param("weight", he_normal(rng, (cin, cout) + self.stride, cin))
        self.add_param("bias", np.zeros(cout))

    def __call__(self, x, output_size=None):
        return ops.upsample(x, self.stride, self.param("weight"), self.param("bias"),
                            output_size)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True):
        super().__init__()
        self.add_param("weight", he_normal(rng, (cin, cout), cin))
        self.has_bias = bias
        if bias:
            self.add_param("bias", np.zeros(cout))

    def __call__(self, x):
        b = self.param("bias") if self.has_bias else None
        return ops.linear(x, self.param("weight"), b)


class Norm(Module):
    """Layer- or batch-norm with learnable scale/shift over ``spec.axis``."""

    def __init__(self, channels: int, spec: NormSpec):
        super().__init__()
        self.spec = spec
        self.add_param("scale", np.ones(channels))
        self.add_param("shift", np.zeros(channels))
        self.stats = RunningStats(channels) if spec.kind == "batch" else None

    def __call__(self, x):
        mode = "train" if self.training else "eval"
        return ops.normalize(x, self.spec, self.param("scale"), self.param("shift"),
                             mode, self.stats)

    def named_buffers(self, prefix=""):
        if self.stats is not None and self.stats.ready:
            yield prefix + "running_mean", self.stats.mean
            yield prefix + "running_var", self.stats.var

    def load_buffer(self, leaf, value):
        if self.stats is None:
            raise KeyError(leaf)
        if leaf == "running_mean":
            self.stats.mean = value.copy()
        elif leaf == "running_var":
            self.stats.var = value.copy()
        else:
            raise KeyError(leaf)


def channel_norm(channels) -> Norm:
    """Layer norm over the channel axis of a volume, per voxel."""
    return Norm(channels, NormSpec("layer", axis=1))


def token_norm(channels) -> Norm:
    return Norm(channels, NormSpec("layer", axis=-1))


def batch_norm(channels) -> Norm:
    return Norm(channels, NormSpec("batch", axis=1))


class SeqConv1d(Module):
    def __init__(self, channels, width, rng, causal=True):
        super().__init__()
        self.causal = causal
        self.add_param("weight", he_normal(rng, (channels, width), width))
        self.add_param("bias", np.zeros(channels))

    def __call__(self, tokens):
        return ops.dwconv1d_seq(tokens, self.param("weight"), self.param("bias"), self.causal)
