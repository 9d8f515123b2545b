"""Verification drivers: finite-difference gradient checks and micro-benchmarks.

Gradient checks compare the tape's reverse-mode gradients against central
differences (``h = 1e-5``). Each input tensor is scored by the normwise
relative error ``|g - g_fd| / max(|g_fd|, floor)`` over the probed entries.
Vector-valued functions are reduced to scalars by a fixed random projection.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses, ops, scan
from .blocks import HGCNBlock, HgConv, HgConvSpec, ResidualBlock, ResidualMambaBlock
from .net import build, forward, preset_plan
from .tensor import (Tape, Tensor, backward, concat, div, exp, finite_difference_grad, log,
                     mul, power, reshape, split, sqrt, tensordot, transpose, tsum)

GRADCHECK_HEADER = ("scope", "case", "input", "probed", "max_rel_err", "passed")
BENCH_HEADER = ("kind", "variant", "size", "seconds", "elements_per_second", "flops",
                "max_abs_diff")
DEFAULT_RTOL = 1e-4
FD_STEP = 1e-5
NORM_FLOOR = 1e-8


@dataclass
class GradResult:
    scope: str
    case: str
    input: str
    probed: int
    rel_err: float
    passed: bool


@dataclass
class GradCase:
    name: str
    fn: Callable          # (*tensors) -> Tensor
    inputs: dict          # name -> ndarray


def relative_error(analytic, numeric, floor: float = NORM_FLOOR) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.linalg.norm(analytic - numeric)
                 / max(np.linalg.norm(numeric), np.linalg.norm(analytic), floor))


def check_case(case: GradCase, rng: np.random.Generator, max_probes: int | None = None,
               scope: str = "op", rtol: float = DEFAULT_RTOL) -> list[GradResult]:
    names = list(case.inputs)
    leaves = [Tensor(case.inputs[n], requires_grad=True, name=n) for n in names]
    proj = None
    with Tape() as tape:
        out = case.fn(*leaves)
        if out.size != 1:
            proj = rng.normal(size=out.shape)
            out = tsum(mul(out, proj))
    grads = backward(out, tape)

    def scalar(*ts):
        y = case.fn(*ts)
        return y.item() if proj is None else float((y.data * proj).sum())

    results = []
    for i, (name, leaf) in enumerate(zip(names, leaves)):
        idx = np.arange(leaf.size)
        if max_probes is not None and leaf.size > max_probes:
            idx = np.sort(rng.choice(leaf.size, max_probes, replace=False))

        def f(z, i=i):
            args = list(leaves)
            args[i] = z
            return scalar(*args)

        fd = finite_difference_grad(f, leaf, FD_STEP, idx).data.reshape(-1)[idx]
        an = grads[leaf].data.reshape(-1)[idx]
        err = relative_error(an, fd)
        results.append(GradResult(scope, case.name, name, len(idx), err, err <= rtol))
    return results


# -- case catalogues -------------------------------------------------------------

def op_cases(rng: np.random.Generator) -> list[GradCase]:
    r = rng.normal
    vol = r(size=(2, 3, 4, 5, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    cases = []

    def conv(spec):
        return lambda x, w, b: ops.conv3d(x, spec, w, b)

    for label, spec in [("conv3d_dense", ops.Conv3dSpec(3, 4, 3, 1, 1)),
                        ("conv3d_strided", ops.Conv3dSpec(3, 2, (3, 2, 1), (2, 1, 2), (1, 0, 1))),
                        ("conv3d_pointwise", ops.Conv3dSpec(3, 5, 1)),
                        ("conv3d_depthwise", ops.Conv3dSpec(3, 3, 3, 1, 1, groups=3))]:
        cases.append(GradCase(label, conv(spec), {"x": vol, "weight": r(size=spec.weight_shape),
                                                  "bias": r(size=spec.out_channels)}))
    g = ops.Conv3dSpec(4, 2, 3, 1, 1, groups=2)
    cases.append(GradCase("conv3d_grouped", conv(g), {
        "x": r(size=(1, 4, 4, 3, 4)), "weight": r(size=g.weight_shape), "bias": r(size=2)}))
    cases.append(GradCase("conv_transpose3d",
                          lambda x, w, b: ops.conv_transpose3d(x, w, b, (2, 1, 2)),
                          {"x": vol, "weight": r(size=(3, 2, 2, 1, 2)), "bias": r(size=2)}))
    cases.append(GradCase("downsample",
                          lambda x, w, b: ops.downsample(x, (2, 1, 2), w, b),
                          {"x": vol, "weight": r(size=(2, 3, 2, 1, 2)), "bias": r(size=2)}))
    cases.append(GradCase("upsample_cropped",
                          lambda x, w, b: ops.upsample(x, (2, 2, 2), w, b, (9, 11, 9)),
                          {"x": vol, "weight": r(size=(3, 2, 2, 2, 2)), "bias": r(size=2)}))
    seq = r(size=(2, 7, 3))
    for causal in (True, False):
        cases.append(GradCase(f"dwconv1d_{'causal' if causal else 'same'}",
                              lambda t, w, b, c=causal: ops.dwconv1d_seq(t, w, b, c),
                              {"tokens": seq, "weight": r(size=(3, 4)), "bias": r(size=3)}))
    cases.append(GradCase("linear", ops.linear,
                          {"tokens": seq, "weight": r(size=(3, 5)), "bias": r(size=5)}))
    cases.append(GradCase("layer_norm_tokens", lambda x, s, b: ops.layer_norm(x, s, b, -1),
                          {"x": seq, "scale": r(size=3), "shift": r(size=3)}))
    cases.append(GradCase("layer_norm_channels", lambda x, s, b: ops.layer_norm(x, s, b, 1),
                          {"x": vol, "scale": r(size=3), "shift": r(size=3)}))
    cases.append(GradCase("batch_norm_train",
                          lambda x, s, b: ops.batch_norm(x, s, b, None, "train"),
                          {"x": vol, "scale": r(size=3), "shift": r(size=3)}))
    stats = ops.RunningStats(3)
    stats.update(r(size=3), rng.uniform(0.5, 2, 3), 0.1)
    cases.append(GradCase("batch_norm_eval",
                          lambda x, s, b: ops.batch_norm(x, s, b, stats, "eval"),
                          {"x": vol, "scale": r(size=3), "shift": r(size=3)}))
    for kind in ("sigmoid", "silu", "gelu", "leaky-relu", "softplus"):
        cases.append(GradCase(kind, lambda x, k=kind: ops.activation(k, x), {"x": vol}))
    cases.append(GradCase("softmax", lambda x: ops.softmax(x, 1), {"x": vol}))
    cases.append(GradCase("vol_to_seq", ops.vol_to_seq, {"x": vol}))
    cases.append(GradCase("seq_to_vol", lambda t: ops.seq_to_vol(t, (4, 5, 4)),
                          {"tokens": r(size=(2, 80, 3))}))
    cases.append(GradCase("add_mul_div", lambda a, b: div(mul(a, b) + a, b * b + 1.0),
                          {"a": r(size=(3, 4)), "b": r(size=(4,))}))
    cases.append(GradCase("exp_log_sqrt_power",
                          lambda a: exp(log(a) * 0.5) + sqrt(a) + power(a, 1.5), {"a": pos}))
    cases.append(GradCase("reshape_transpose_sum",
                          lambda a: tsum(transpose(reshape(a, (4, 3)), (1, 0)) * 2.0, axis=0),
                          {"a": r(size=(3, 4))}))
    cases.append(GradCase("split_concat",
                          lambda a: concat(split(a, [1, 3], axis=1)[::-1], axis=1),
                          {"a": r(size=(2, 4))}))
    cases.append(GradCase("tensordot", lambda a, b: tensordot(a, b, ([0, 2], [1, 0])),
                          {"a": r(size=(3, 4, 2)), "b": r(size=(2, 3, 5))}))
    cases.append(GradCase("getitem", lambda a: a[1:, ::2] * 3.0, {"a": r(size=(3, 4))}))

    # state space pieces
    delta = rng.uniform(0.05, 0.5, (2, 6, 3))
    A = -rng.uniform(0.5, 2.0, (3, 4))
    B = r(size=(2, 6, 4))
    cases.append(GradCase("zoh_discretize",
                          lambda d, a, b: concat(list(scan.discretize(d, a, b)), axis=-1),
                          {"delta": delta, "A": A, "B": B}))
    a_bar = rng.uniform(0.2, 0.99, (2, 70, 3, 4))
    b_bar = r(size=(2, 70, 3, 4))
    for mode in ("sequential", "parallel"):
        fn = scan.scan_sequential if mode == "sequential" else scan.scan_parallel
        cases.append(GradCase(f"scan_{mode}", fn, {
            "x": r(size=(2, 70, 3)), "A_bar": a_bar, "B_bar": b_bar,
            "C": r(size=(2, 70, 4)), "D": r(size=3)}))
    params = scan.init_ssm_params(3, 4, rng)
    names = list(params.named())

    def ssm_fn(mode):
        def fn(tokens, *ps):
            return scan.ssm_layer(tokens, scan.SelectiveSSMParams(**dict(zip(names, ps))), mode)
        return fn

    for mode in ("sequential", "parallel"):
        inputs = {"tokens": r(size=(2, 9, 3))}
        inputs.update({k: v.numpy() for k, v in params.named().items()})
        cases.append(GradCase(f"ssm_layer_{mode}", ssm_fn(mode), inputs))

    # losses
    labels = rng.integers(0, 3, (2, 4, 4, 6))
    target = losses.one_hot(labels, 3)
    part = losses.RegionPartition.from_splits((4, 4, 6), (2, 2, 3))
    logits = r(size=(2, 3, 4, 4, 6))

    def on_probs(loss_fn):
        return lambda z: loss_fn(ops.softmax(z, 1))

    cases.append(GradCase("dice_loss", on_probs(lambda p: losses.dice_loss(p, target)),
                          {"logits": logits}))
    cases.append(GradCase("tversky_loss",
                          on_probs(lambda p: losses.tversky_loss(p, target, 0.3, 0.7)),
                          {"logits": logits}))
    cases.append(GradCase("region_tversky_loss",
                          on_probs(lambda p: losses.region_tversky_loss(p, target, part, 0.3, 0.7)),
                          {"logits": logits}))
    cases.append(GradCase("region_dice_loss",
                          on_probs(lambda p: losses.region_dice_loss(p, target, part)),
                          {"logits": logits}))
    cases.append(GradCase("cross_entropy", lambda z: losses.cross_entropy(z, labels),
                          {"logits": logits}))
    cfg = losses.LossConfig(region_splits=(2, 2, 3))
    cases.append(GradCase("compound", lambda z: losses.compound(z, labels, cfg),
                          {"logits": logits}))
    cases.append(GradCase("supervise", lambda z0, z1: losses.supervise([z0, z1], labels, cfg),
                          {"logits0": logits, "logits1": r(size=(2, 3, 2, 2, 3))}))
    return cases


def module_case(name, module, call, x):
    """Gradient of ``call(module, x)`` with respect to ``x`` and every parameter."""
    pnames = [k for k, _ in module.named_parameters()]

    def fn(xt, *ps):
        module.bind_parameters(dict(zip(pnames, ps)))
        return call(module, xt)

    inputs = {"x": x}
    inputs.update({k: t.numpy() for k, t in module.named_parameters()})
    return GradCase(name, fn, inputs)


def block_cases(rng: np.random.Generator) -> list[GradCase]:
    x8 = rng.normal(size=(2, 8, 4, 3, 4))
    cases = []
    for gating in ("additive", "multiplicative"):
        hg = HgConv(HgConvSpec(8, 3, gating=gating), rng)
        cases.append(module_case(f"hgconv_{gating}", hg, lambda m, x: m(x), x8))
    cases.append(module_case("residual_block", ResidualBlock(8, 4, rng),
                              lambda m, x: m(x), x8))
    for gating in ("additive", "multiplicative"):
        blk = HGCNBlock(8, 2, rng, gating=gating)
        cases.append(module_case(f"hgcn_block_{gating}", blk, lambda m, x: m(x), x8))
    x4 = rng.normal(size=(2, 4, 3, 3, 4))
    for mode in ("sequential", "parallel"):
        blk = ResidualMambaBlock(4, rng, state_size=4)
        cases.append(module_case(f"residual_mamba_block_{mode}", blk,
                                  lambda m, x, md=mode: m(x, md), x4))
    return cases


def network_cases(rng: np.random.Generator) -> list[GradCase]:
    plan = preset_plan("micro")
    net = build(plan, 1, 3, seed=int(rng.integers(1 << 31)))
    x = rng.normal(size=(1, 1) + tuple(plan.patch_size))
    labels = rng.integers(0, 3, (1,) + tuple(plan.patch_size))
    cfg = losses.LossConfig(region_splits=(2, 2, 2))
    case = module_case("micro_network", net,
                        lambda m, xt: losses.supervise(forward(m, xt), labels, cfg), x)
    return [case]


SCOPES = {"op": (op_cases, None), "block": (block_cases, 24), "network": (network_cases, 6)}


def gradcheck(scope: str = "op", seed: int = 0, rtol: float = DEFAULT_RTOL) -> list[GradResult]:
    """Run every case of ``scope`` (``op``, ``block``, ``network`` or ``all``)."""
    scopes = list(SCOPES) if scope == "all" else [scope]
    out = []
    for sc in scopes:
        if sc not in SCOPES:
            raise ValueError(f"unknown gradcheck scope {sc!r}; choose from {list(SCOPES)} or 'all'")
        make, probes = SCOPES[sc]
        rng = np.random.default_rng([seed, list(SCOPES).index(sc)])
        for case in make(rng):
            out.extend(check_case(case, rng, probes, sc, rtol))
    return out


def gradcheck_csv(results: list[GradResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRADCHECK_HEADER)
    for r in results:
        w.writerow([r.scope, r.case, r.input, r.probed, f"{r.rel_err:.3e}", int(r.passed)])
    return buf.getvalue()


# -- benchmarks ------------------------------------------------------------------

def _best_time(fn, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench(kind: str, sizes=None, seed: int = 0, repeats: int = 3) -> list[dict]:
    """Timing rows; ``scan`` sizes are sequence lengths, ``hgconv`` sizes cube edges."""
    rng = np.random.default_rng(seed)
    rows = []
    if kind == "scan":
        for L in sizes or (256, 1024, 4096):
            a = rng.uniform(0.5, 1.0, (L, 8, 16))
            b = rng.normal(size=(L, 8, 16))
            ts, hs = _best_time(lambda: scan._run_scan(a, b, "sequential", scan.DEFAULT_CHUNK),
                                repeats)
            tp, hp = _best_time(lambda: scan._run_scan(a, b, "parallel", scan.DEFAULT_CHUNK),
                                repeats)
            diff = float(np.abs(hs - hp).max())
            if diff > 1e-10:
                raise AssertionError(f"parallel scan deviates by {diff} at L={L}")
            for variant, t in (("sequential", ts), ("parallel", tp)):
                rows.append(dict(kind="scan", variant=variant, size=L, seconds=t,
                                 elements_per_second=a.size / t, flops="", max_abs_diff=diff))
    elif kind == "hgconv":
        from .blocks import flop_estimate_hgconv
        channels = 32
        for edge in sizes or (8, 16):
            x = Tensor(rng.normal(size=(1, channels, edge, edge, edge)))
            for order in range(2, 7):
                layer = HgConv(HgConvSpec(channels, order), rng)
                t, _ = _best_time(lambda: layer(x), repeats)
                vox = edge ** 3
                rows.append(dict(kind="hgconv", variant=f"order{order}", size=edge, seconds=t,
                                 elements_per_second=vox / t,
                                 flops=flop_estimate_hgconv(channels, order, vox),
                                 max_abs_diff=""))
    else:
        raise ValueError(f"unknown bench kind {kind!r}; choose 'scan' or 'hgconv'")
    return rows


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
