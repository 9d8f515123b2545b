"""Selective state-space layer: discretization and the linear recurrence.

The recurrence ``h_t = a_t * h_{t-1} + b_t`` (``h_{-1} = 0``) is evaluated
either step by step or as an associative scan over elements ``(a, b)`` with

    (a1, b1) o (a2, b2) = (a1 * a2, a2 * b1 + b2)

where ``(a1, b1)`` is the earlier element. The parallel path splits the
sequence into chunks, scans every chunk at once with a pairwise-reduction
(work-efficient) scan, scans the chunk totals the same way, and fixes up.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ops
from .errors import ConfigurationError, ContractError, ShapeError
from .tensor import Tensor, as_tensor, exp, mul, neg, record, reshape, tsum

DEFAULT_CHUNK = 64
SERIES_THRESHOLD = 1e-8


class ScanElement(NamedTuple):
    a: object
    b: object


def combine(e1: ScanElement, e2: ScanElement) -> ScanElement:
    """Compose two recurrence steps; ``e1`` precedes ``e2``."""
    return ScanElement(e1.a * e2.a, e2.a * e1.b + e2.b)


# ---------------------------------------------------------------------------
# raw numpy scans along axis 0

def _scan_sequential_np(a, b):
    h = np.empty_like(b)
    state = np.zeros(b.shape[1:])
    for t in range(b.shape[0]):
        state = a[t] * state + b[t]
        h[t] = state
    return h


def _prefix_np(a, b):
    """Inclusive scan along axis 0 by recursive pairwise reduction.

    Returns the cumulative decays and the cumulative increments.
    """
    L = a.shape[0]
    if L == 1:
        return a.copy(), b.copy()
    if L % 2:
        a = np.concatenate([a, np.ones((1,) + a.shape[1:])])
        b = np.concatenate([b, np.zeros((1,) + b.shape[1:])])
    a_e, a_o = a[0::2], a[1::2]
    b_e, b_o = b[0::2], b[1::2]
    PA, PB = _prefix_np(a_o * a_e, a_o * b_e + b_o)
    outA = np.empty_like(a)
    outB = np.empty_like(b)
    outA[1::2], outB[1::2] = PA, PB
    outA[0], outB[0] = a[0], b[0]
    outA[2::2] = a_e[1:] * PA[:-1]
    outB[2::2] = a_e[1:] * PB[:-1] + b_e[1:]
    return outA[:L], outB[:L]


def _scan_parallel_np(a, b, chunk=DEFAULT_CHUNK):
    if chunk < 1:
        raise ConfigurationError("chunk size must be >= 1")
    L = a.shape[0]
    rest = a.shape[1:]
    nc = -(-L // chunk)
    pad = nc * chunk - L
    if pad:
        a = np.concatenate([a, np.ones((pad,) + rest)])
        b = np.concatenate([b, np.zeros((pad,) + rest)])
    # [chunk, nc, ...]: every chunk scanned at once
    ac = a.reshape((nc, chunk) + rest).swapaxes(0, 1)
    bc = b.reshape((nc, chunk) + rest).swapaxes(0, 1)
    A_loc, B_loc = _prefix_np(ac, bc)
    if nc > 1:
        _, carry = _prefix_np(A_loc[-1], B_loc[-1])
        carry_in = np.concatenate([np.zeros((1,) + rest), carry[:-1]])
        h = A_loc * carry_in[None] + B_loc
    else:
        h = B_loc
    return h.swapaxes(0, 1).reshape((nc * chunk,) + rest)[:L]


def _run_scan(a, b, mode, chunk):
    if mode == "sequential":
        return _scan_sequential_np(a, b)
    if mode == "parallel":
        return _scan_parallel_np(a, b, chunk)
    raise ConfigurationError(f"scan mode must be 'sequential' or 'parallel', got {mode!r}")


def linear_recurrence(a, b, axis: int = 1, mode: str = "parallel",
                      chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Differentiable ``h_t = a_t h_{t-1} + b_t`` along ``axis``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"decay {a.shape} and increment {b.shape} differ")
    ad = np.moveaxis(a.data, axis, 0)
    bd = np.moveaxis(b.data, axis, 0)
    h = _run_scan(ad, bd, mode, chunk)

    def backward(g, needs):
        g0 = np.moveaxis(g, axis, 0)
        # adjoint recurrence runs right to left with decays shifted by one
        ra = np.concatenate([np.zeros((1,) + ad.shape[1:]), ad[::-1][:-1]])
        G = _run_scan(ra, g0[::-1], mode, chunk)[::-1]
        ga = gb = None
        if needs[0]:
            h_prev = np.concatenate([np.zeros((1,) + h.shape[1:]), h[:-1]])
            ga = np.moveaxis(G * h_prev, 0, axis)
        if needs[1]:
            gb = np.moveaxis(G, 0, axis).copy()
        return ga, gb

    return record("linear_recurrence", np.ascontiguousarray(np.moveaxis(h, 0, axis)),
                  (a, b), backward)


# ---------------------------------------------------------------------------
# zero-order-hold discretization (diagonal A)

def _outer(delta, A):
    return delta.data[..., None] * A.data


def zoh_decay(delta, A) -> Tensor:
    """``exp(delta * A)`` broadcast to ``[..., C, N]``."""
    delta, A = as_tensor(delta), as_tensor(A)
    out = np.exp(_outer(delta, A))
    dd, Ad = delta.data, A.data
    lead = tuple(range(dd.ndim - 1))

    def backward(g, needs):
        ge = g * out
        gd = (ge * Ad).sum(axis=-1) if needs[0] else None
        gA = (ge * dd[..., None]).sum(axis=lead) if needs[1] else None
        return gd, gA

    return record("zoh_decay", out, (delta, A), backward)


def zoh_input_coef(delta, A) -> Tensor:
    """``(exp(delta * A) - 1) / A`` with a series branch for tiny ``delta * A``."""
    delta, A = as_tensor(delta), as_tensor(A)
    dd, Ad = delta.data, A.data
    z = dd[..., None] * Ad
    d = np.broadcast_to(dd[..., None], z.shape)
    small = np.abs(z) < SERIES_THRESHOLD
    out = np.where(small, d * (1.0 + 0.5 * z), np.expm1(z) / Ad)
    lead = tuple(range(dd.ndim - 1))

    def backward(g, needs):
        gd = gA = None
        if needs[0]:
            gd = (g * np.exp(z)).sum(axis=-1)
        if needs[1]:
            tiny = np.abs(z) < 1e-3
            with np.errstate(all="ignore"):
                direct = (z * np.exp(z) - np.expm1(z)) / (Ad * Ad)
            series = d * d * (0.5 + z / 3.0 + z * z / 8.0)
            gA = (g * np.where(tiny, series, direct)).sum(axis=lead)
        return gd, gA

    return record("zoh_input_coef", out, (delta, A), backward)


def discretize(delta, A, B):
    """Return ``(A_bar, B_bar)`` shaped ``[..., L, C, N]``.

    ``delta`` is ``[..., L, C]`` (positive), ``A`` is ``[C, N]`` (negative)
    and ``B`` is ``[..., L, N]``.
    """
    delta, A, B = as_tensor(delta), as_tensor(A), as_tensor(B)
    if not (delta.data > 0).all():
        raise ContractError("step sizes must be positive")
    if not (A.data < 0).all():
        raise ContractError("state matrix must be strictly negative")
    if delta.shape[-1] != A.shape[0] or B.shape[:-1] != delta.shape[:-1] \
            or B.shape[-1] != A.shape[1]:
        raise ShapeError(f"discretize shapes: delta {delta.shape}, A {A.shape}, B {B.shape}")
    A_bar = zoh_decay(delta, A)
    coef = zoh_input_coef(delta, A)
    B_bar = mul(coef, reshape(B, B.shape[:-1] + (1, B.shape[-1])))
    return A_bar, B_bar


def _scan(x, A_bar, B_bar, C_out, D, mode, chunk):
    x, A_bar, B_bar, C_out, D = (as_tensor(t) for t in (x, A_bar, B_bar, C_out, D))
    if A_bar.shape != B_bar.shape or A_bar.shape[:-1] != x.shape:
        raise ShapeError(f"scan shapes: x {x.shape}, A_bar {A_bar.shape}, B_bar {B_bar.shape}")
    if C_out.shape != x.shape[:-1] + (A_bar.shape[-1],) or D.shape != (x.shape[-1],):
        raise ShapeError(f"scan readout shapes: C {C_out.shape}, D {D.shape}")
    L_axis = x.ndim - 2
    b = mul(B_bar, reshape(x, x.shape + (1,)))
    h = linear_recurrence(A_bar, b, axis=L_axis, mode=mode, chunk=chunk)
    readout = tsum(mul(h, reshape(C_out, C_out.shape[:-1] + (1, C_out.shape[-1]))), axis=-1)
    return readout + mul(D, x)


def scan_sequential(x, A_bar, B_bar, C_out, D) -> Tensor:
    """``y_t = <C_t, h_t> + D * x_t`` with ``h`` from the step-by-step recurrence.

    ``x`` is ``[..., L, C]``; ``A_bar``/``B_bar`` are ``[..., L, C, N]``.
    """
    return _scan(x, A_bar, B_bar, C_out, D, "sequential", DEFAULT_CHUNK)


def scan_parallel(x, A_bar, B_bar, C_out, D, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Same contract as :func:`scan_sequential`, via the chunked associative scan."""
    return _scan(x, A_bar, B_bar, C_out, D, "parallel", chunk)


# ---------------------------------------------------------------------------
# the layer

@dataclass
class SelectiveSSMParams:
    """Learned parameters of one selective SSM over ``channels`` lanes.

    ``A = -exp(a_log)`` keeps the diagonal state matrix negative; the step
    size is ``softplus(tokens @ w_delta + delta_bias)``.
    """
    a_log: Tensor       # [C, N]
    w_b: Tensor         # [C, N]
    w_c: Tensor         # [C, N]
    w_delta: Tensor     # [C, C]
    delta_bias: Tensor  # [C]
    d_skip: Tensor      # [C]

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[1]

    def named(self) -> dict:
        return {"a_log": self.a_log, "w_b": self.w_b, "w_c": self.w_c,
                "w_delta": self.w_delta, "delta_bias": self.delta_bias,
                "d_skip": self.d_skip}


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def init_ssm_params(channels: int, state_size: int, rng: np.random.Generator,
                    dt_range=(1e-3, 1e-1)) -> SelectiveSSMParams:
    a_log = np.log(np.tile(np.arange(1, state_size + 1, dtype=np.float64), (channels, 1)))
    std = np.sqrt(2.0 / channels)
    w_b = rng.normal(0.0, std, (channels, state_size))
    w_c = rng.normal(0.0, std, (channels, state_size))
    w_delta = rng.normal(0.0, std, (channels, channels))
    dt = rng.uniform(dt_range[0], dt_range[1], channels)
    return SelectiveSSMParams(
        a_log=Tensor(a_log, requires_grad=True, name="a_log"),
        w_b=Tensor(w_b, requires_grad=True, name="w_b"),
        w_c=Tensor(w_c, requires_grad=True, name="w_c"),
        w_delta=Tensor(w_delta, requires_grad=True, name="w_delta"),
        delta_bias=Tensor(inverse_softplus(dt), requires_grad=True, name="delta_bias"),
        d_skip=Tensor(np.ones(channels), requires_grad=True, name="d_skip"),
    )


def ssm_layer(tokens, params: SelectiveSSMParams, mode: str = "parallel",
              chunk: int = DEFAULT_CHUNK) -> Tensor:
    """Selective SSM over ``[N, L, C]`` tokens with input-dependent B, C and step."""
    tokens = as_tensor(tokens)
    if tokens.shape[-1] != params.channels:
        raise ShapeError(f"ssm tokens {tokens.shape} vs {params.channels} channels")
    B = ops.linear(tokens, params.w_b)
    C_out = ops.linear(tokens, params.w_c)
    delta = ops.softplus(ops.linear(tokens, params.w_delta, params.delta_bias))
    A = neg(exp(params.a_log))
    A_bar, B_bar = discretize(delta, A, B)
    return _scan(tokens, A_bar, B_bar, C_out, params.d_skip, mode, chunk)
