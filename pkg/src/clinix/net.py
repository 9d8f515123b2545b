"""Stage-wise U-shaped network: plans, presets, construction and forward pass.

A :class:`NetworkPlan` lists, per encoder stage, the block kind (``"H"`` for
HGCN, ``"M"`` for residual Mamba, ``"R"`` for a plain residual block), the
stage width and the stride of the downsampler that opens the stage. HGCN
stages consume ``orders`` left to right.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .blocks import (MAX_ORDER, MIN_ORDER, HGCNBlock, ResidualBlock, ResidualMambaBlock,
                     round_working_channels)
from .errors import BuildError, ConfigurationError, PlanError, ShapeError
from .layers import Downsample, Module, Upsample, pointwise
from .tensor import as_tensor, concat

BLOCK_KINDS = ("H", "M", "R")
MIN_POOL_EXTENT = 8      # an axis is halved only while it is at least this long
MAX_STAGES, MIN_STAGES = 6, 4


@dataclass
class NetworkPlan:
    name: str
    stages: int
    block_kinds: list
    orders: list
    channels: list
    strides: list
    patch_size: list
    batch_size: int = 2
    deep_supervision: bool = True
    activation: str = "leaky-relu"
    gating: str = "additive"
    gate_scale: float | None = None

    def __post_init__(self):
        self.block_kinds = [str(k) for k in self.block_kinds]
        self.orders = [int(o) for o in self.orders]
        self.channels = [int(c) for c in self.channels]
        self.strides = [[int(s) for s in st] for st in self.strides]
        self.patch_size = [int(p) for p in self.patch_size]

    def validate(self) -> "NetworkPlan":
        s = self.stages
        if s < 1:
            raise PlanError("a plan needs at least one stage")
        for fname in ("block_kinds", "channels", "strides"):
            if len(getattr(self, fname)) != s:
                raise PlanError(f"{fname} has {len(getattr(self, fname))} entries for {s} stages")
        bad = [k for k in self.block_kinds if k not in BLOCK_KINDS]
        if bad:
            raise PlanError(f"unknown block kinds {bad}")
        n_h = self.block_kinds.count("H")
        if len(self.orders) != n_h:
            raise PlanError(f"{len(self.orders)} orders for {n_h} HGCN stages")
        for o in self.orders:
            if not MIN_ORDER <= o <= MAX_ORDER:
                raise PlanError(f"HGCN order {o} outside [{MIN_ORDER}, {MAX_ORDER}]")
        if any(c < 1 for c in self.channels):
            raise PlanError("channel counts must be positive")
        if len(self.patch_size) != 3:
            raise PlanError("patch size needs three extents")
        for st in self.strides:
            if len(st) != 3 or min(st) < 1:
                raise PlanError(f"invalid stride triple {st}")
        prod = self.cumulative_strides()[-1]
        for p, q in zip(self.patch_size, prod):
            if p % q:
                raise PlanError(
                    f"patch {self.patch_size} not divisible by cumulative strides {prod}")
        if self.gating not in ("additive", "multiplicative"):
            raise PlanError(f"unknown gating mode {self.gating!r}")
        if self.batch_size < 1:
            raise PlanError("batch size must be positive")
        return self

    def cumulative_strides(self) -> list:
        out, acc = [], [1, 1, 1]
        for st in self.strides:
            acc = [a * b for a, b in zip(acc, st)]
            out.append(list(acc))
        return out

    def stage_extents(self) -> list:
        """Closed-form spatial extents at the output of every encoder stage."""
        return [[p // c for p, c in zip(self.patch_size, cum)]
                for cum in self.cumulative_strides()]

    def pooling_per_axis(self) -> tuple:
        return tuple(sum(1 for st in self.strides if st[a] > 1) for a in range(3))

    def hgcn_orders_by_stage(self) -> dict:
        it = iter(self.orders)
        return {i: next(it) for i, k in enumerate(self.block_kinds) if k == "H"}

    def replace(self, **changes) -> "NetworkPlan":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """One ``"key": value`` per line, values in compact JSON."""
        lines = [f'  {json.dumps(f.name)}: {json.dumps(getattr(self, f.name))}'
                 for f in dataclasses.fields(self)]
        return "{\n" + ",\n".join(lines) + "\n}\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkPlan":
        data = json.loads(text)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise PlanError(f"unknown plan keys {sorted(unknown)}")
        return cls(**data).validate()


def save_plan(plan: NetworkPlan, path):
    with open(path, "w") as fh:
        fh.write(plan.to_text())


def load_plan(path) -> NetworkPlan:
    with open(path) as fh:
        return NetworkPlan.from_text(fh.read())


def stagewise_kinds(stages: int) -> list:
    n_h = math.ceil(stages / 2)
    return ["H"] * n_h + ["M"] * (stages - n_h)


def stagewise_orders(stages: int) -> list:
    return list(range(MIN_ORDER, MIN_ORDER + math.ceil(stages / 2)))


def default_channels(stages: int, base: int = 32, cap: int = 320) -> list:
    return [min(base * 2 ** i, cap) for i in range(stages)]


def spacing_strides(patch, spacing, max_downsamplings: int) -> list:
    """Per-step stride triples from the anisotropy-aware halving rule.

    At each step an axis is halved when it is still at least
    ``MIN_POOL_EXTENT`` long and its current spacing is within a factor two
    of the finest current spacing. Stops when no axis qualifies.
    """
    ext = [int(e) for e in patch]
    sp = [float(s) for s in spacing]
    steps = []
    for _ in range(max_downsamplings):
        finest = min(sp)
        st = [2 if e >= MIN_POOL_EXTENT and s <= 2 * finest else 1 for e, s in zip(ext, sp)]
        if max(st) == 1:
            break
        steps.append(st)
        ext = [e // k for e, k in zip(ext, st)]
        sp = [s * k for s, k in zip(sp, st)]
    return steps


# Dataset presets: patch, batch, voxel spacing after resampling, pooling counts (None = unknown)
_DATASETS = {
    "pcd": ((80, 192, 160), 2, (1.25, 0.77, 0.77), (4, 5, 5)),
    "lungt": ((96, 160, 160), 2, (1.25, 0.77, 0.77), None),
    "livert": ((64, 192, 192), 2, (1.22, 0.76, 0.76), (4, 5, 5)),
    "abd": ((40, 224, 192), 2, (2.5, 0.80, 0.80), (3, 5, 5)),
    "brats": ((128, 128, 128), 2, (1.0, 1.0, 1.0), None),
}


def preset_plan(name: str) -> NetworkPlan:
    """Named configurations: the five dataset rows, ``toy`` and ``micro``."""
    key = name.lower()
    if key == "toy":
        return NetworkPlan(
            name="toy", stages=4, block_kinds=["H", "H", "M", "M"], orders=[2, 3],
            channels=[8, 16, 32, 64], strides=[[1, 1, 1]] + [[2, 2, 2]] * 3,
            patch_size=[24, 24, 24], batch_size=1).validate()
    if key == "micro":
        return NetworkPlan(
            name="micro", stages=2, block_kinds=["H", "M"], orders=[2],
            channels=[2, 4], strides=[[1, 1, 1], [2, 2, 2]],
            patch_size=[8, 8, 8], batch_size=1).validate()
    if key not in _DATASETS:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose from {sorted(_DATASETS) + ['micro', 'toy']}")
    patch, batch, spacing, pooling = _DATASETS[key]
    stages = 6
    steps = spacing_strides(patch, spacing, stages - 1)
    steps += [[1, 1, 1]] * (stages - 1 - len(steps))
    plan = NetworkPlan(
        name=key, stages=stages, block_kinds=stagewise_kinds(stages),
        orders=stagewise_orders(stages), channels=default_channels(stages),
        strides=[[1, 1, 1]] + steps, patch_size=list(patch), batch_size=batch)
    if pooling is not None and plan.pooling_per_axis() != pooling:
        raise PlanError(f"{key}: derived pooling {plan.pooling_per_axis()} != expected {pooling}")
    return plan.validate()


@dataclass
class Fingerprint:
    median_shape: tuple
    spacing: tuple
    class_count: int
    memory_budget: int = 128 ** 3   # max voxels per patch


def derive_plan(fp: Fingerprint, name: str = "derived") -> NetworkPlan:
    """Small stand-in for self-configuration (see module docs in README)."""
    shape = [int(e) for e in fp.median_shape]
    spacing = [float(s) for s in fp.spacing]
    if len(shape) != 3 or len(spacing) != 3:
        raise PlanError("fingerprint needs three extents and three spacings")
    if min(shape) < 1 or min(spacing) <= 0 or fp.class_count < 1 or fp.memory_budget < 1:
        raise PlanError(f"fingerprint values must be positive: {fp}")
    if max(shape) < MIN_POOL_EXTENT:
        raise PlanError(f"extents {shape} too small to plan (all below {MIN_POOL_EXTENT})")

    patch = list(shape)
    while math.prod(patch) > fp.memory_budget:
        phys = [e * s if e > MIN_POOL_EXTENT else -1 for e, s in zip(patch, spacing)]
        axis = int(np.argmax(phys))
        if phys[axis] < 0:
            break
        patch[axis] = max(MIN_POOL_EXTENT, int(patch[axis] * 0.9))

    steps = spacing_strides(patch, spacing, MAX_STAGES - 1)
    stages = min(MAX_STAGES, max(MIN_STAGES, len(steps) + 1))
    steps = steps[:stages - 1] + [[1, 1, 1]] * (stages - 1 - len(steps))
    strides = [[1, 1, 1]] + steps
    cum = [1, 1, 1]
    for st in strides:
        cum = [a * b for a, b in zip(cum, st)]
    patch = [max(c, (p // c) * c) for p, c in zip(patch, cum)]
    return NetworkPlan(
        name=name, stages=stages, block_kinds=stagewise_kinds(stages),
        orders=stagewise_orders(stages), channels=default_channels(stages),
        strides=strides, patch_size=patch, batch_size=2).validate()


# Ablation block arrangements; orders list the HGCN stages left to right
ABLATIONS = {
    "baseline": (["R"] * 6, []),
    "only-mamba": (["R", "R", "R", "M", "M", "M"], []),
    "only-hgcn-234566": (["H"] * 6, [2, 3, 4, 5, 6, 6]),
    "only-hgcn-33333": (["H"] * 5 + ["R"], [3] * 5),
    "only-hgcn-44444": (["H"] * 5 + ["R"], [4] * 5),
    "hgcn-23456-mamba-bot": (["H"] * 5 + ["M"], [2, 3, 4, 5, 6]),
    "stagewise-444": (["H", "H", "H", "M", "M", "M"], [4, 4, 4]),
    "stagewise-456": (["H", "H", "H", "M", "M", "M"], [4, 5, 6]),
    "stagewise-234": (["H", "H", "H", "M", "M", "M"], [2, 3, 4]),
}


def ablation_plan(base: NetworkPlan, variant: str) -> NetworkPlan:
    if base.stages != 6:
        raise PlanError("ablation arrangements are defined for six-stage plans")
    try:
        kinds, orders = ABLATIONS[variant]
    except KeyError:
        raise ConfigurationError(f"unknown ablation {variant!r}") from None
    return base.replace(name=f"{base.name}-{variant}", block_kinds=list(kinds),
                        orders=list(orders)).validate()


# ---------------------------------------------------------------------------

class Network(Module):
    """Encoder stages, mirrored decoder with skip concatenation, and heads."""

    def __init__(self, plan: NetworkPlan, in_channels: int, num_classes: int, seed: int = 0):
        super().__init__()
        try:
            plan.validate()
        except PlanError as exc:
            raise BuildError(str(exc)) from exc
        self.plan = plan
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.seed = seed
        rng = np.random.default_rng(seed)
        orders = plan.hgcn_orders_by_stage()
        s = plan.stages
        cin = in_channels
        for i in range(s):
            c = plan.channels[i]
            setattr(self, f"down{i}", Downsample(cin, c, plan.strides[i], rng))
            try:
                setattr(self, f"block{i}", self._make_block(plan.block_kinds[i], c,
                                                            orders.get(i), rng))
            except ConfigurationError as exc:
                raise BuildError(f"stage {i}: {exc}") from exc
            cin = c
        n_heads = (s - 1 if plan.deep_supervision else 1) if s > 1 else 0
        for l in range(s - 2, -1, -1):
            c = plan.channels[l]
            setattr(self, f"up{l}", Upsample(plan.channels[l + 1], c, plan.strides[l + 1], rng))
            setattr(self, f"dec{l}", ResidualBlock(2 * c, c, rng, plan.activation))
            if l < n_heads:
                setattr(self, f"head{l}", pointwise(c, num_classes, rng))
        if s == 1:
            setattr(self, "head0", pointwise(plan.channels[0], num_classes, rng))
        self.n_heads = max(n_heads, 1)

    def _make_block(self, kind, channels, order, rng):
        plan = self.plan
        if kind == "H":
            return HGCNBlock(channels, order, rng,
                             working_channels=round_working_channels(channels, order),
                             gate_scale=plan.gate_scale, gating=plan.gating,
                             act=plan.activation)
        if kind == "M":
            return ResidualMambaBlock(channels, rng, act=plan.activation)
        return ResidualBlock(channels, channels, rng, plan.activation)

    def heads(self) -> list:
        return [getattr(self, f"head{l}") for l in range(self.n_heads)]

    def __call__(self, batch, trace: list | None = None, scan_mode: str | None = None):
        return forward(self, batch, trace, scan_mode)


def build(plan: NetworkPlan, in_channels: int, num_classes: int, seed: int = 0) -> Network:
    return Network(plan, in_channels, num_classes, seed)


def forward(net: Network, batch, trace: list | None = None,
            scan_mode: str | None = None) -> list:
    """Logits per supervised scale, full resolution first.

    If ``trace`` is a list, ``(phase, stage, shape)`` tuples are appended for
    every encoder stage and decoder scale.
    """
    batch = as_tensor(batch)
    plan = net.plan
    if batch.ndim != 5 or list(batch.shape[2:]) != plan.patch_size \
            or batch.shape[1] != net.in_channels:
        raise ShapeError(
            f"batch {batch.shape} does not match patch {plan.patch_size} "
            f"with {net.in_channels} input channels")
    skips = []
    h = batch
    for i in range(plan.stages):
        h = getattr(net, f"down{i}")(h)
        block = getattr(net, f"block{i}")
        h = block(h, scan_mode) if isinstance(block, ResidualMambaBlock) else block(h)
        skips.append(h)
        if trace is not None:
            trace.append(("encoder", i, h.shape))
    outs = {}
    for l in range(plan.stages - 2, -1, -1):
        skip = skips[l]
        h = getattr(net, f"up{l}")(h, output_size=skip.shape[2:])
        h = getattr(net, f"dec{l}")(concat([h, skip], axis=1))
        if trace is not None:
            trace.append(("decoder", l, h.shape))
        if l < net.n_heads:
            outs[l] = getattr(net, f"head{l}")(h)
    if plan.stages == 1:
        outs[0] = net.head0(h)
    logits = [outs[l] for l in sorted(outs)]
    if trace is not None:
        for l, lg in enumerate(logits):
            trace.append(("head", l, lg.shape))
    return logits


def supervision_weights(n: int) -> list:
    w = [2.0 ** -l for l in range(n)]
    total = sum(w)
    return [x / total for x in w]
