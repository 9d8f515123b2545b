"""Encoder blocks: high-order gated convolution, HGCN and residual Mamba."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError, ShapeError
from .layers import (Conv3d, Linear, Module, SeqConv1d, batch_norm, channel_norm,
                     conv3x3, pointwise, token_norm)
from .ops import Conv3dSpec
from .scan import SelectiveSSMParams, init_ssm_params, ssm_layer
from .tensor import Tensor, add, mul, split

MIN_ORDER, MAX_ORDER = 2, 6


def channel_partition(channels: int, order: int) -> list[int]:
    """Widths ``[U0, V0, V1, ..., V_{n-1}]`` splitting ``2 * channels``.

    ``V_j`` has ``channels / 2**(order - j - 1)`` channels and ``U0`` matches
    ``V0``; the last piece is ``channels`` wide.
    """
    if not MIN_ORDER <= order <= MAX_ORDER:
        raise ConfigurationError(f"order must lie in [{MIN_ORDER}, {MAX_ORDER}], got {order}")
    step = 2 ** (order - 1)
    if channels < 1 or channels % step:
        raise ConfigurationError(
            f"{channels} channels not divisible by 2**(order-1) = {step}")
    widths = [channels // 2 ** (order - j - 1) for j in range(order)]
    return [widths[0]] + widths


def round_working_channels(channels: int, order: int) -> int:
    step = 2 ** (order - 1)
    return -(-channels // step) * step


def activate(kind: str, x):
    if kind == "leaky-relu":
        return ops.leaky_relu(x)
    return ops.activation(kind, x)


@dataclass(frozen=True)
class HgConvSpec:
    channels: int
    order: int
    gate_scale: float | None = None   # None -> 1/order
    gating: str = "additive"
    dw_kernel: int = 3

    def __post_init__(self):
        channel_partition(self.channels, self.order)
        if self.gating not in ("additive", "multiplicative"):
            raise ConfigurationError(f"unknown gating mode {self.gating!r}")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            raise ConfigurationError("depthwise kernel must be odd and positive")

    @property
    def scale(self) -> float:
        return 1.0 / self.order if self.gate_scale is None else float(self.gate_scale)


class HgConv(Module):
    """Recursive gated convolution of a given order on ``C'`` channels."""

    def __init__(self, spec: HgConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        C = spec.channels
        self.widths = channel_partition(C, spec.order)
        self.proj_in = pointwise(C, 2 * C, rng)
        k = spec.dw_kernel
        self.dw = Conv3d(Conv3dSpec(2 * C, 2 * C, k, 1, k // 2, groups=2 * C), rng)
        self.phis = []
        for j in range(1, spec.order):
            phi = pointwise(self.widths[j], self.widths[j + 1], rng)
            setattr(self, f"phi{j}", phi)
            self.phis.append(phi)

    def __call__(self, h):
        if h.shape[1] != self.spec.channels:
            raise ShapeError(f"hgconv expects {self.spec.channels} channels, got {h.shape[1]}")
        parts = split(self.dw(self.proj_in(h)), self.widths, axis=1)
        u0, vs = parts[0], parts[1:]
        u = add(vs[0], u0)
        gamma = self.spec.scale
        for j, phi in enumerate(self.phis, start=1):
            gated = mul(phi(u), gamma)
            u = add(vs[j], gated) if self.spec.gating == "additive" else mul(vs[j], gated)
        return u


class ResidualBlock(Module):
    """conv3 -> norm -> act -> conv3 -> norm, plus identity or 1x1 shortcut.

    No activation follows the sum, so a zeroed second conv leaves exactly the
    shortcut path.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, act: str = "leaky-relu"):
        super().__init__()
        self.act = act
        self.conv1 = conv3x3(cin, cout, rng)
        self.norm1 = batch_norm(cout)
        self.conv2 = conv3x3(cout, cout, rng)
        self.norm2 = batch_norm(cout)
        self.shortcut = None if cin == cout else pointwise(cin, cout, rng, bias=False)

    def __call__(self, x):
        y = activate(self.act, self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        skip = x if self.shortcut is None else self.shortcut(x)
        return add(y, skip)


class HGCNBlock(Module):
    def __init__(self, channels: int, order: int, rng: np.random.Generator,
                 working_channels: int | None = None, gate_scale: float | None = None,
                 gating: str = "additive", act: str = "leaky-relu"):
        super().__init__()
        self.channels = channels
        self.act = act
        wc = working_channels or round_working_channels(channels, order)
        self.res = ResidualBlock(channels, channels, rng, act)
        self.stem = pointwise(channels, wc, rng, bias=False)
        self.stem_norm = batch_norm(wc)
        self.norm_in = channel_norm(wc)
        self.hgconv = HgConv(HgConvSpec(wc, order, gate_scale, gating), rng)
        self.norm_out = channel_norm(wc)
        self.proj = pointwise(wc, channels, rng)

    def __call__(self, h_in):
        if h_in.shape[1] != self.channels:
            raise ShapeError(f"HGCN block expects {self.channels} channels, got {h_in.shape[1]}")
        r = self.res(h_in)
        h = self.stem_norm(self.stem(r))
        h = add(self.hgconv(self.norm_in(h)), h)
        return activate(self.act, add(self.proj(self.norm_out(h)), r))


class SSM(Module):
    def __init__(self, channels, state_size, rng):
        super().__init__()
        for name, t in init_ssm_params(channels, state_size, rng).named().items():
            self.add_param(name, t.data)

    @property
    def params(self) -> SelectiveSSMParams:
        return SelectiveSSMParams(**self._params)


class ResidualMambaBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator, expand: int = 2,
                 state_size: int = 16, conv_width: int = 4, mlp_ratio: int = 4,
                 act: str = "leaky-relu", causal: bool = True, scan_mode: str = "parallel"):
        super().__init__()
        self.channels = channels
        self.act = act
        self.scan_mode = scan_mode
        inner = expand * channels
        self.pre_conv = pointwise(channels, channels, rng, bias=False)
        self.pre_norm = batch_norm(channels)
        self.norm_in = token_norm(channels)
        self.in_proj = Linear(channels, inner, rng)
        self.seq_conv = SeqConv1d(inner, conv_width, rng, causal)
        self.ssm = SSM(inner, state_size, rng)
        self.gate_proj = Linear(channels, inner, rng)
        self.norm_mid = token_norm(inner)
        self.fc1 = Linear(inner, mlp_ratio * channels, rng)
        self.fc2 = Linear(mlp_ratio * channels, channels, rng)

    def __call__(self, m_in, scan_mode: str | None = None):
        if m_in.shape[1] != self.channels:
            raise ShapeError(f"Mamba block expects {self.channels} channels, got {m_in.shape[1]}")
        mode = scan_mode or self.scan_mode
        m = add(activate(self.act, self.pre_norm(self.pre_conv(m_in))), m_in)
        tokens = self.norm_in(ops.vol_to_seq(m))
        branch = ops.silu(self.seq_conv(self.in_proj(tokens)))
        m1 = ssm_layer(branch, self.ssm.params, mode)
        m2 = ops.silu(self.gate_proj(tokens))
        out = self.fc2(ops.gelu(self.fc1(self.norm_mid(mul(m1, m2)))))
        return add(ops.seq_to_vol(out, m.shape[2:]), m)


def flop_estimate_hgconv(channels: int, order: int, voxels: int, dw_kernel: int = 3) -> int:
    """Multiply-add count of one hgconv forward at ``voxels`` positions."""
    widths = channel_partition(channels, order)
    proj = channels * 2 * channels
    dw = 2 * channels * dw_kernel ** 3
    phis = sum(widths[j] * widths[j + 1] for j in range(1, order))
    merges = widths[1] + sum(widths[j + 1] * 2 for j in range(1, order))
    return voxels * (proj + dw + phis + merges)
