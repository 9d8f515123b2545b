"""Acceptance suite: one or more tests per criterion, tagged with ``criterion(n)``.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import time

import numpy as np
import pytest

from clinix.blocks import HgConvSpec, channel_partition
from clinix.errors import ConfigurationError
from clinix.losses import (LossConfig, RegionPartition, dice_loss, one_hot,
                           region_tversky_loss, tversky_loss)
from clinix.net import Fingerprint, build, derive_plan, forward, preset_plan
from clinix.ops import softmax
from clinix.scan import ScanElement, combine, discretize, scan_parallel, scan_sequential
from clinix.storage import load_checkpoint, save_checkpoint
from clinix.synth import SynthSpec, synth_generate
from clinix.tensor import Tape, Tensor, backward, concat, sub
from clinix.train import TrainConfig, evaluate, from_checkpoint, train
from clinix.verify import SCOPES, gradcheck

OVERFIT_LR = 3e-3
OVERFIT_STEPS = 200


# -- 1. gradient suite ----------------------------------------------------------

@pytest.mark.criterion(1)
def test_gradient_suite():
    t0 = time.perf_counter()
    results = gradcheck("all", seed=0, rtol=1e-4)
    elapsed = time.perf_counter() - t0
    failed = [r for r in results if not r.passed]
    assert {r.scope for r in results} == set(SCOPES)
    cases = {r.case for r in results}
    for needed in ("hgcn_block", "residual_mamba_block", "micro_network"):
        assert any(c.startswith(needed) for c in cases), needed
    assert not failed, failed
    assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"


# -- 2. scan equivalence --------------------------------------------------------

def random_scan(rng, L, C, N):
    delta = rng.uniform(1e-3, 1.0, (L, C))
    A = -rng.uniform(0.1, 3.0, (C, N))
    A_bar, B_bar = discretize(delta, A, rng.normal(size=(L, N)))
    return (rng.normal(size=(L, C)), A_bar, B_bar, rng.normal(size=(L, N)),
            rng.normal(size=C))


@pytest.mark.criterion(2)
def test_scan_equivalence():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        L = 1024 if seed % 10 == 0 else int(rng.integers(1, 1025))
        C, N = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        args = random_scan(rng, L, C, N)
        diff = np.abs(scan_parallel(*args).data - scan_sequential(*args).data).max()
        worst = max(worst, diff)
    assert worst <= 1e-10, worst


@pytest.mark.criterion(2)
def test_combine_associativity():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        e1, e2, e3 = (ScanElement(rng.uniform(0, 1), rng.normal()) for _ in range(3))
        left, right = combine(combine(e1, e2), e3), combine(e1, combine(e2, e3))
        assert abs(left.a - right.a) <= 1e-12 and abs(left.b - right.b) <= 1e-12


# -- 3. partition arithmetic ----------------------------------------------------

@pytest.mark.criterion(3)
@pytest.mark.parametrize("order", range(2, 7))
def test_partition_arithmetic(order):
    step = 2 ** (order - 1)
    for m in range(1, 11):
        c = m * step
        widths = channel_partition(c, order)
        assert sum(widths) == 2 * c
        assert widths[-1] == c
        assert HgConvSpec(c, order).channels == c
    for bad in (step + 1, 3 * step - 1, step // 2 if step > 2 else 1):
        with pytest.raises(ConfigurationError):
            channel_partition(bad, order)
        with pytest.raises(ConfigurationError):
            HgConvSpec(bad, order)


# -- 4. loss identities ---------------------------------------------------------

def random_probs(rng, shape=(2, 3, 4, 5, 6)):
    prob = softmax(Tensor(rng.normal(size=shape) * 2), 1)
    return prob, one_hot(rng.integers(0, shape[1], (shape[0],) + shape[2:]), shape[1])


@pytest.mark.criterion(4)
def test_loss_identities():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        prob, y = random_probs(rng)
        a = rng.uniform(0.05, 0.95)
        t = tversky_loss(prob, y, 0.5, 0.5, eps=0.0).item()
        assert abs(t - dice_loss(prob, y, eps=0.0).item()) <= 1e-12
        whole = RegionPartition.from_splits(prob.shape[2:], (1, 1, 1))
        r = region_tversky_loss(prob, y, whole, a, 1 - a, eps=0.0).item()
        assert abs(r - tversky_loss(prob, y, a, 1 - a, eps=0.0).item()) <= 1e-12


@pytest.mark.criterion(4)
def test_tversky_increasing_in_beta():
    # prediction misses two of four foreground voxels and adds one false positive
    p = np.array([0.9, 0.8, 0.1, 0.2, 0.7, 0.1, 0.0, 0.05])
    labels = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    prob = Tensor(np.stack([1 - p, p]).reshape(1, 2, 1, 1, 8))
    y = one_hot(labels.reshape(1, 1, 1, 8), 2)
    fn = ((1 - p) * labels).sum()
    assert fn > 0
    vals = [tversky_loss(prob, y, round(1 - b, 10), b).item() for b in (0.5, 0.6, 0.7, 0.8, 0.9)]
    assert all(x < y_ for x, y_ in zip(vals, vals[1:])), vals


@pytest.mark.criterion(4)
def test_region_gradient_locality():
    rng = np.random.default_rng(4)
    part = RegionPartition.from_splits((6, 4, 4), (3, 2, 1))
    labels = part.labels()
    y = one_hot(rng.integers(0, 2, (1, 6, 4, 4)), 2)
    base = rng.uniform(0.05, 0.95, (1, 1, 6, 4, 4))

    def grad(fg):
        t = Tensor(fg, requires_grad=True)
        with Tape() as tape:
            prob = concat([sub(Tensor(np.ones_like(fg)), t), t], axis=1)
            loss = region_tversky_loss(prob, y, part)
        return backward(loss, tape)[t].data[0, 0]

    g0 = grad(base)
    for box in range(part.k):
        moved = base.copy()
        moved[0, 0][labels == box] += 0.02
        changed = grad(moved) != g0
        assert changed[labels == box].any()
        assert not changed[labels != box].any()


# -- 5. stage-wise plan structure -----------------------------------------------

@pytest.mark.criterion(5)
def test_derived_plan_structure():
    plan = derive_plan(Fingerprint(median_shape=(128, 128, 128), spacing=(1.0, 1.0, 1.0),
                                   class_count=2))
    assert plan.stages == 6
    text = plan.to_text()
    assert '  "block_kinds": ["H", "H", "H", "M", "M", "M"],' in text.splitlines()
    assert '  "orders": [2, 3, 4],' in text.splitlines()
    assert plan.hgcn_orders_by_stage() == {0: 2, 1: 3, 2: 4}


# -- 6. shape telescoping -------------------------------------------------------

def closed_form_extents(patch, strides):
    out, cum = [], np.ones(3, dtype=int)
    for s in strides:
        cum = cum * np.asarray(s)
        out.append([int(np.ceil(p / c)) if p % c else p // c for p, c in zip(patch, cum)])
    return out


@pytest.mark.criterion(6)
@pytest.mark.parametrize("preset,patch", [("abd", [40, 32, 32]), ("toy", None)])
def test_shape_telescoping(preset, patch):
    plan = preset_plan(preset)
    if patch is not None:
        plan = plan.replace(patch_size=patch).validate()
    expected = closed_form_extents(plan.patch_size, plan.strides)
    assert [list(e) for e in plan.stage_extents()] == expected
    net = build(plan, 1, 3, seed=0)
    trace = []
    logits = forward(net, np.zeros((1, 1, *plan.patch_size)), trace)
    enc = [list(s[2:]) for phase, _, s in trace if phase == "encoder"]
    dec = {l: list(s[2:]) for phase, l, s in trace if phase == "decoder"}
    heads = [list(s[2:]) for phase, _, s in trace if phase == "head"]
    assert enc == expected
    assert all(dec[l] == expected[l] for l in dec)
    assert heads == expected[:len(heads)] and len(heads) == len(logits) >= 2
    assert all(lg.shape[:2] == (1, 3) for lg in logits)


# -- 7. toy overfit -------------------------------------------------------------

@pytest.fixture(scope="module", params=["additive", "multiplicative"])
def overfit(request):
    data = synth_generate(SynthSpec(seed=3), 1)
    cfg = TrainConfig(plan="toy", lr=OVERFIT_LR, steps_per_epoch=OVERFIT_STEPS,
                      loss=LossConfig(alpha=0.3, beta=0.7, normalize_regions=True),
                      plan_overrides={"gating": request.param})
    t0 = time.perf_counter()
    result = train(cfg, data)
    return request.param, result, data, time.perf_counter() - t0


@pytest.mark.criterion(7)
def test_toy_overfit(overfit):
    gating, result, data, elapsed = overfit
    plan = result.net.plan
    assert plan.block_kinds == ["H", "H", "M", "M"] and plan.orders == [2, 3]
    assert plan.patch_size == [24, 24, 24] and plan.gating == gating
    assert len(result.losses) == OVERFIT_STEPS
    assert result.train_dsc[-1] >= 0.95, (gating, result.train_dsc[-1])
    assert elapsed < 300, f"{gating} run took {elapsed:.0f}s"


def test_toy_overfit_loss_trend(overfit):
    losses = np.asarray(overfit[1].losses)
    smoothed = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smoothed[-1] < losses[19]


def test_toy_overfit_eval_consistency(overfit):
    _, result, data, _ = overfit
    m = evaluate(result.net, data)
    assert abs(m.mean_dsc - result.train_dsc[-1]) <= 0.01


# -- 8. recall direction -------------------------------------------------------

RECALL_STEPS = 100


def small_target_recall(seed, beta):
    data = synth_generate(SynthSpec(seed=100 + seed, tw_band=(0.002, 0.004), radius=(1.5, 2.5),
                                    blob_count=(1, 2), noise=0.5), 2)
    assert all(0.002 <= s.target_ratio() <= 0.004 for s in data)
    loss = LossConfig(alpha=round(1 - beta, 10), beta=beta, normalize_regions=True,
                      compound_with=("tversky",))
    cfg = TrainConfig(plan="toy", lr=OVERFIT_LR, steps_per_epoch=RECALL_STEPS, seed=seed,
                      loss=loss)
    return evaluate(train(cfg, data).net, data).mean_recall


@pytest.mark.criterion(8)
def test_recall_direction():
    recall = {b: [small_target_recall(s, b) for s in range(3)] for b in (0.5, 0.7)}
    print(f"recall beta=0.5 {recall[0.5]} beta=0.7 {recall[0.7]}")
    assert np.mean(recall[0.7]) >= np.mean(recall[0.5])


# -- 9. determinism and checkpoint round trip -----------------------------------

@pytest.mark.criterion(9)
def test_determinism_and_round_trip(tmp_path):
    data = synth_generate(SynthSpec(seed=5), 1)
    cfg = TrainConfig(plan="toy", lr=OVERFIT_LR, steps_per_epoch=5, epochs=2, seed=7,
                      checkpoint=str(tmp_path / "run.mckp"))
    a = train(cfg, data)
    b = train(cfg.replace(checkpoint=None), data)
    assert a.losses == b.losses and a.train_dsc == b.train_dsc
    for k, v in a.checkpoint.tensors.items():
        assert np.array_equal(v, b.checkpoint.tensors[k])

    save_checkpoint(tmp_path / "copy.mckp", a.checkpoint)
    restored = from_checkpoint(load_checkpoint(tmp_path / "copy.mckp"))
    x = np.stack([data[0].image])
    for mode in ("train", "eval"):
        getattr(a.net, mode)()
        getattr(restored, mode)()
        for lhs, rhs in zip(forward(a.net, x), forward(restored, x)):
            assert np.array_equal(lhs.data, rhs.data)
