"""Differentiable neural primitives over :class:`~clinix.tensor.Tensor`.

Volumes are laid out ``[N, C, D, H, W]`` and token sequences ``[N, L, C]``.
Heavy ops (convolutions, norms, linear maps) are single fused tape entries
with hand-written backward rules; every one of them is covered by the
finite-difference gradient suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ConfigurationError, ShapeError, StateError
from .tensor import Tensor, as_tensor, record, reshape, transpose


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ConfigurationError(f"expected 3 per-axis values, got {v}")
    return v


@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"channels {self.in_channels}->{self.out_channels} not divisible "
                f"by groups={self.groups}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigurationError(f"invalid kernel/stride/padding in {self}")

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def output_extents(self, extents) -> tuple:
        out = tuple((e + 2 * p - k) // s + 1 for e, p, k, s in
                    zip(extents, self.padding, self.kernel, self.stride))
        if min(out) < 1:
            raise ConfigurationError(
                f"conv output extents {out} < 1 for input extents {tuple(extents)}")
        return out


def conv3d(x, spec: Conv3dSpec, weight, bias=None) -> Tensor:
    """Zero-padded 3D cross-correlation."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv3d input {x.shape} does not match {spec}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv3d weight {weight.shape}, expected {spec.weight_shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (spec.out_channels,):
            raise ShapeError(f"conv3d bias {bias.shape}, expected ({spec.out_channels},)")
    out_ext = spec.output_extents(x.shape[2:])

    if spec.groups == 1 and spec.kernel == (1, 1, 1) and spec.stride == (1, 1, 1) \
            and spec.padding == (0, 0, 0):
        fwd, bwd = _pointwise(x.data, weight.data)
    elif spec.groups == spec.in_channels == spec.out_channels:
        fwd, bwd = _depthwise(x.data, weight.data, spec, out_ext)
    elif spec.groups == 1:
        fwd, bwd = _dense(x.data, weight.data, spec, out_ext)
    else:
        fwd, bwd = _grouped(x.data, weight.data, spec, out_ext)

    if bias is not None:
        fwd = fwd + bias.data[None, :, None, None, None]

    def backward(g, needs):
        gx, gw = bwd(g, needs[0], needs[1])
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and needs[2] else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record("conv3d", fwd, parents, backward)


def _pointwise(xd, wd):
    w2 = wd[:, :, 0, 0, 0]
    out = np.tensordot(w2, xd, axes=([1], [1])).transpose(1, 0, 2, 3, 4)

    def bwd(g, need_x, need_w):
        gx = gw = None
        if need_x:
            gx = np.tensordot(w2, g, axes=([0], [1])).transpose(1, 0, 2, 3, 4)
        if need_w:
            gw = np.tensordot(g, xd, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            gw = gw.reshape(wd.shape)
        return gx, gw

    return np.ascontiguousarray(out), bwd


def _pad(xd, padding):
    if not any(padding):
        return xd
    pd, ph, pw = padding
    return np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _crop(gp, padding, shape):
    pd, ph, pw = padding
    return gp[:, :, pd:pd + shape[2], ph:ph + shape[3], pw:pw + shape[4]]


def _offset_slices(spec, out_ext):
    sd, sh, sw = spec.stride
    Do, Ho, Wo = out_ext
    kd, kh, kw = spec.kernel
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                yield (i, j, k), (slice(None), slice(None),
                                  slice(i, i + sd * (Do - 1) + 1, sd),
                                  slice(j, j + sh * (Ho - 1) + 1, sh),
                                  slice(k, k + sw * (Wo - 1) + 1, sw))


def _im2col(xp, spec, out_ext):
    # [C_in * taps, N * Do * Ho * Wo], channel-major to match weight.reshape(C_out, -1)
    N, C = xp.shape[:2]
    taps = int(np.prod(spec.kernel))
    cols = np.empty((C, taps, N) + tuple(out_ext))
    for t, (_, sl) in enumerate(_offset_slices(spec, out_ext)):
        cols[:, t] = xp[sl].swapaxes(0, 1)
    return cols.reshape(C * taps, -1)


def _dense(xd, wd, spec, out_ext):
    xp = _pad(xd, spec.padding)
    N = xd.shape[0]
    Co = wd.shape[0]
    cols = _im2col(xp, spec, out_ext)
    wmat = wd.reshape(Co, -1)
    out = (wmat @ cols).reshape((Co, N) + tuple(out_ext)).swapaxes(0, 1)

    def bwd(g, need_x, need_w):
        gx = gw = None
        gmat = g.swapaxes(0, 1).reshape(Co, -1)
        if need_x:
            dcols = (wmat.T @ gmat).reshape((xd.shape[1], -1, N) + tuple(out_ext))
            gp = np.zeros(xp.shape)
            for t, (_, sl) in enumerate(_offset_slices(spec, out_ext)):
                gp[sl] += dcols[:, t].swapaxes(0, 1)
            gx = _crop(gp, spec.padding, xd.shape)
        if need_w:
            gw = (gmat @ cols.T).reshape(wd.shape)
        return gx, gw

    return np.ascontiguousarray(out), bwd


def _depthwise(xd, wd, spec, out_ext):
    xp = _pad(xd, spec.padding)
    N, C = xd.shape[:2]
    out = np.zeros((N, C) + out_ext)
    for (i, j, k), sl in _offset_slices(spec, out_ext):
        out += wd[:, 0, i, j, k][None, :, None, None, None] * xp[sl]

    def bwd(g, need_x, need_w):
        gx = gw = None
        if need_x:
            gp = np.zeros(xp.shape)
            for (i, j, k), sl in _offset_slices(spec, out_ext):
                gp[sl] += wd[:, 0, i, j, k][None, :, None, None, None] * g
            gx = _crop(gp, spec.padding, xd.shape)
        if need_w:
            gw = np.zeros(wd.shape)
            for (i, j, k), sl in _offset_slices(spec, out_ext):
                gw[:, 0, i, j, k] = np.einsum("ncdhw,ncdhw->c", g, xp[sl])
        return gx, gw

    return out, bwd


def _grouped(xd, wd, spec, out_ext):
    G = spec.groups
    ci = spec.in_channels // G
    co = spec.out_channels // G
    sub = Conv3dSpec(ci, co, spec.kernel, spec.stride, spec.padding, 1)
    parts = [_dense(xd[:, g * ci:(g + 1) * ci], wd[g * co:(g + 1) * co], sub, out_ext)
             for g in range(G)]
    out = np.concatenate([p[0] for p in parts], axis=1)

    def bwd(g, need_x, need_w):
        res = [p[1](g[:, i * co:(i + 1) * co], need_x, need_w) for i, p in enumerate(parts)]
        gx = np.concatenate([r[0] for r in res], axis=1) if need_x else None
        gw = np.concatenate([r[1] for r in res], axis=0) if need_w else None
        return gx, gw

    return out, bwd


def conv_transpose3d(x, weight, bias=None, stride=(2, 2, 2), output_size=None) -> Tensor:
    """Transposed convolution with kernel == stride (non-overlapping tiles).

    ``weight`` is ``[C_in, C_out, s_d, s_h, s_w]``. ``output_size`` may exceed
    ``extent * stride`` by less than one stride; the extra border is zero
    (bias only), mirroring the floor in strided downsampling.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    stride = _triple(stride)
    N, Ci, D, H, W = x.shape
    if weight.shape[0] != Ci or weight.shape[2:] != stride:
        raise ShapeError(f"transposed-conv weight {weight.shape} vs input {x.shape}, stride {stride}")
    Co = weight.shape[1]
    sd, sh, sw = stride
    base = (D * sd, H * sh, W * sw)
    if output_size is None:
        output_size = base
    output_size = _triple(output_size)
    if any(o < b or o >= b + s for o, b, s in zip(output_size, base, stride)):
        raise ShapeError(f"output size {output_size} unreachable from {x.shape[2:]} at stride {stride}")
    xd, wd = x.data, weight.data
    t = np.tensordot(xd, wd, axes=([1], [0]))  # [N,D,H,W,Co,sd,sh,sw]
    t = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape((N, Co) + base)
    out = np.zeros((N, Co) + output_size)
    out[:, :, :base[0], :base[1], :base[2]] = t
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None, None]

    def backward(g, needs):
        gc = g[:, :, :base[0], :base[1], :base[2]].reshape(N, Co, D, sd, H, sh, W, sw)
        gx = gw = gb = None
        if needs[0]:
            gx = np.tensordot(gc, wd, axes=([1, 3, 5, 7], [1, 2, 3, 4])).transpose(0, 4, 1, 2, 3)
        if needs[1]:
            gw = np.tensordot(xd, gc, axes=([0, 2, 3, 4], [0, 2, 4, 6]))
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record("conv_transpose3d", out, parents, backward)


def downsample(x, stride, weight, bias=None) -> Tensor:
    """Learnable strided convolution whose kernel equals the stride."""
    x = as_tensor(x)
    stride = _triple(stride)
    if min(stride) < 1:
        raise ConfigurationError(f"strides must be >= 1, got {stride}")
    for e, s in zip(x.shape[2:], stride):
        if e < s:
            raise ConfigurationError(f"extent {e} smaller than stride {s}")
    weight = as_tensor(weight)
    spec = Conv3dSpec(x.shape[1], weight.shape[0], stride, stride, 0, 1)
    return conv3d(x, spec, weight, bias)


def upsample(x, stride, weight, bias=None, output_size=None) -> Tensor:
    """Inverse extent arithmetic of :func:`downsample` via transposed conv."""
    stride = _triple(stride)
    if min(stride) < 1:
        raise ConfigurationError(f"strides must be >= 1, got {stride}")
    return conv_transpose3d(x, weight, bias, stride, output_size)


def dwconv1d_seq(tokens, weight, bias=None, causal: bool = True) -> Tensor:
    """Per-channel 1D convolution along the token axis of ``[N, L, C]``.

    ``weight`` is ``[C, K]``; in causal mode tap ``K-1`` multiplies the
    current token and tap ``k`` the token ``K-1-k`` steps earlier.
    """
    tokens, weight = as_tensor(tokens), as_tensor(weight)
    if weight.ndim != 2 or weight.shape[1] < 1:
        raise ConfigurationError(f"kernel width must be >= 1, weight shape {weight.shape}")
    N, L, C = tokens.shape
    if weight.shape[0] != C:
        raise ShapeError(f"dwconv weight {weight.shape} vs {C} channels")
    K = weight.shape[1]
    left = K - 1 if causal else (K - 1) // 2
    right = K - 1 - left
    xp = np.pad(tokens.data, ((0, 0), (left, right), (0, 0)))
    wd = weight.data
    out = np.zeros((N, L, C))
    for k in range(K):
        out += xp[:, k:k + L] * wd[:, k]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data

    def backward(g, needs):
        gx = gw = gb = None
        if needs[0]:
            gp = np.zeros(xp.shape)
            for k in range(K):
                gp[:, k:k + L] += g * wd[:, k]
            gx = gp[:, left:left + L]
        if needs[1]:
            gw = np.stack([np.einsum("nlc,nlc->c", g, xp[:, k:k + L]) for k in range(K)], axis=1)
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    parents = (tokens, weight) if bias is None else (tokens, weight, bias)
    return record("dwconv1d_seq", out, parents, backward)


def linear(tokens, weight, bias=None) -> Tensor:
    """Affine map over the trailing axis; ``weight`` is ``[C_in, C_out]``."""
    tokens, weight = as_tensor(tokens), as_tensor(weight)
    if tokens.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: trailing extent {tokens.shape[-1]} vs weight {weight.shape}")
    lead = tokens.shape[:-1]
    x2 = tokens.data.reshape(-1, weight.shape[0])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def backward(g, needs):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(tokens.shape) if needs[0] else None
        gw = x2.T @ g2 if needs[1] else None
        gb = g2.sum(axis=0) if bias is not None and needs[2] else None
        return gx, gw, gb

    parents = (tokens, weight) if bias is None else (tokens, weight, bias)
    return record("linear", out.reshape(lead + (wd.shape[1],)), parents, backward)


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormSpec:
    """``kind`` is ``"layer"`` (over one channel axis per position) or ``"batch"``."""
    kind: str = "layer"
    eps: float = 1e-5
    momentum: float = 0.1
    axis: int = 1

    def __post_init__(self):
        if self.kind not in ("layer", "batch"):
            raise ConfigurationError(f"unknown norm kind {self.kind!r}")
        if not self.eps > 0:
            raise ConfigurationError("norm epsilon must be positive")


class RunningStats:
    """Batch-norm running mean/variance; empty until the first train step."""

    def __init__(self, channels: int):
        self.channels = channels
        self.mean = None
        self.var = None

    @property
    def ready(self) -> bool:
        return self.mean is not None

    def update(self, mean, var, momentum):
        if self.mean is None:
            self.mean, self.var = mean.copy(), var.copy()
        else:
            self.mean = (1 - momentum) * self.mean + momentum * mean
            self.var = (1 - momentum) * self.var + momentum * var


def _normalize_core(x, scale, shift, axes, caxis, mean, var, eps, batch_stats):
    xd = x.data
    bshape = [1] * x.ndim
    bshape[caxis] = xd.shape[caxis]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    sd = scale.data.reshape(bshape)
    out = xhat * sd + shift.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != caxis)

    def backward(g, needs):
        gx = gs = gb = None
        if needs[0]:
            gh = g * sd
            if batch_stats:
                m1 = gh.mean(axis=axes, keepdims=True)
                m2 = (gh * xhat).mean(axis=axes, keepdims=True)
                gx = (gh - m1 - xhat * m2) * inv
            else:
                gx = gh * inv
        if needs[1]:
            gs = (g * xhat).sum(axis=red)
        if needs[2]:
            gb = g.sum(axis=red)
        return gx, gs, gb

    return record("normalize", out, (x, scale, shift), backward)


def layer_norm(x, scale, shift, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over a single channel axis at every other position."""
    x = as_tensor(x)
    caxis = axis % x.ndim
    scale, shift = as_tensor(scale), as_tensor(shift)
    if scale.shape != (x.shape[caxis],) or shift.shape != (x.shape[caxis],):
        raise ShapeError(f"norm affine {scale.shape} vs normalized extent {x.shape[caxis]}")
    mean = x.data.mean(axis=caxis, keepdims=True)
    var = x.data.var(axis=caxis, keepdims=True)
    return _normalize_core(x, scale, shift, (caxis,), caxis, mean, var, eps, True)


def batch_norm(x, scale, shift, stats: RunningStats | None, mode: str = "train",
               eps: float = 1e-5, momentum: float = 0.1, axis: int = 1) -> Tensor:
    """Batch-norm over every axis except the channel axis."""
    x = as_tensor(x)
    caxis = axis % x.ndim
    scale, shift = as_tensor(scale), as_tensor(shift)
    C = x.shape[caxis]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"norm affine {scale.shape} vs normalized extent {C}")
    axes = tuple(i for i in range(x.ndim) if i != caxis)
    bshape = [1] * x.ndim
    bshape[caxis] = C
    if mode == "train":
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if stats is not None:
            count = x.size // C
            unbiased = var.reshape(-1) * (count / max(count - 1, 1))
            stats.update(mean.reshape(-1), unbiased, momentum)
        return _normalize_core(x, scale, shift, axes, caxis, mean, var, eps, True)
    if mode != "eval":
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if stats is None or not stats.ready:
        raise StateError("eval-mode batch-norm before any running statistics exist")
    mean = stats.mean.reshape(bshape)
    var = stats.var.reshape(bshape)
    return _normalize_core(x, scale, shift, axes, caxis, mean, var, eps, False)


def normalize(x, spec: NormSpec, scale, shift, mode: str = "train",
              stats: RunningStats | None = None) -> Tensor:
    if spec.kind == "layer":
        return layer_norm(x, scale, shift, spec.axis, spec.eps)
    return batch_norm(x, scale, shift, stats, mode, spec.eps, spec.momentum, spec.axis)


# ---------------------------------------------------------------------------
# activations

LEAKY_SLOPE = 0.01


def _unary(kind, x, out, dfun):
    return record(kind, out, (x,), lambda g, n: (g * dfun(),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = special.expit(x.data)
    return _unary("sigmoid", x, s, lambda: s * (1.0 - s))


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = special.expit(xd)
    return _unary("silu", x, xd * s, lambda: s * (1.0 + xd * (1.0 - s)))


def gelu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return _unary("gelu", x, xd * cdf, lambda: cdf + xd * pdf)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    pos = xd > 0
    return _unary("leaky_relu", x, np.where(pos, xd, slope * xd),
                  lambda: np.where(pos, 1.0, slope))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _unary("softplus", x, out, lambda: special.expit(xd))


def softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    s = special.softmax(x.data, axis=axis)

    def backward(g, needs):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", s, (x,), backward)


_ACTIVATIONS = {"silu": silu, "gelu": gelu, "leaky-relu": leaky_relu,
                "sigmoid": sigmoid, "softplus": softplus}


def activation(kind: str, x, axis: int | None = None) -> Tensor:
    if kind == "softmax":
        if axis is None:
            raise ConfigurationError("softmax needs an explicit axis")
        return softmax(x, axis)
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# volume <-> sequence

def vol_to_seq(x) -> Tensor:
    """``[N, C, D, H, W]`` -> ``[N, D*H*W, C]``, raster order D, then H, then W."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"vol_to_seq expects a 5D volume, got {x.shape}")
    N, C = x.shape[:2]
    return transpose(reshape(x, (N, C, -1)), (0, 2, 1))


def seq_to_vol(tokens, extents) -> Tensor:
    tokens = as_tensor(tokens)
    N, L, C = tokens.shape
    D, H, W = extents
    if L != D * H * W:
        raise ShapeError(f"{L} tokens cannot fill extents {tuple(extents)}")
    return reshape(transpose(tokens, (0, 2, 1)), (N, C, D, H, W))
