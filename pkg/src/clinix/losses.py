"""Overlap losses on soft predictions, cross-entropy and deep supervision.

Soft confusion counts are taken one-vs-rest per foreground class (class 0 is
background), per batch item and, for the region variants, per box of a
regular grid. For class ``c``::

    TP = sum p_c * y_c      FP = sum p_c * (1 - y_c)      FN = sum (1 - p_c) * y_c

Every per-(item, class) term is averaged; region terms are summed over the
boxes first, so a region loss lies in ``[0, k]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ConfigurationError, ContractError, DataError, ShapeError
from .net import supervision_weights
from .ops import softmax
from .tensor import Tensor, add, as_tensor, div, mean, mul, record, sub, tsum

PROB_TOLERANCE = 1e-9
VARIANTS = ("dice", "tversky", "region-dice", "region-tversky", "cross-entropy", "compound")
OVERLAP_TERMS = ("dice", "tversky", "region-dice", "region-tversky")
FIXED_ALPHA_BETA = (0.3, 0.7)


class RegionPartition:
    """Disjoint axis-aligned boxes tiling a ``(D, H, W)`` volume.

    Built either from a box size (boundary boxes clipped) or, through
    :meth:`from_splits`, from a number of boxes per axis. Boxes are ordered
    depth-major.
    """

    def __init__(self, extents, box):
        extents = tuple(int(e) for e in extents)
        box = tuple(int(b) for b in box)
        if len(box) != 3 or min(box) < 1:
            raise ConfigurationError(f"invalid box size {box}")
        self._setup(extents, [np.arange(0, e, b) for e, b in zip(extents, box)])
        self.box = box

    def _setup(self, extents, starts):
        if len(extents) != 3 or min(extents) < 1:
            raise ConfigurationError(f"invalid partition extents {extents}")
        self.extents = extents
        self.starts = starts
        self.box = None

    @classmethod
    def from_splits(cls, extents, splits=(4, 4, 4)) -> "RegionPartition":
        """``splits[a]`` near-equal boxes along axis ``a`` (fewer if the axis is shorter)."""
        extents = tuple(int(e) for e in extents)
        splits = tuple(int(s) for s in splits)
        if len(splits) != 3 or min(splits) < 1:
            raise ConfigurationError(f"invalid region splits {splits}")
        part = cls.__new__(cls)
        part._setup(extents, [(np.arange(min(s, e)) * e) // min(s, e)
                              for e, s in zip(extents, splits)])
        return part

    @property
    def counts(self) -> tuple:
        return tuple(len(s) for s in self.starts)

    @property
    def k(self) -> int:
        return int(np.prod(self.counts))

    def lengths(self, axis: int) -> np.ndarray:
        return np.diff(np.append(self.starts[axis], self.extents[axis]))

    def boxes(self) -> list:
        """Every box as a tuple of three slices."""
        axes = [[slice(int(s), int(s + n)) for s, n in zip(self.starts[a], self.lengths(a))]
                for a in range(3)]
        return [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]

    def labels(self) -> np.ndarray:
        """Box index of every voxel, shape ``extents``."""
        idx = np.zeros(self.extents, dtype=np.int64)
        for r, sl in enumerate(self.boxes()):
            idx[sl] = r
        return idx

    def check(self, extents):
        if tuple(extents) != self.extents:
            raise ConfigurationError(
                f"partition built for {self.extents}, volume has extents {tuple(extents)}")

    def reduce(self, arr: np.ndarray) -> np.ndarray:
        """Sum the trailing three axes of ``arr`` per box -> ``[..., k]``."""
        out = arr
        for a in range(3):
            out = np.add.reduceat(out, self.starts[a], axis=arr.ndim - 3 + a)
        return out.reshape(arr.shape[:-3] + (self.k,))

    def expand(self, arr: np.ndarray) -> np.ndarray:
        """Inverse layout of :meth:`reduce`: broadcast ``[..., k]`` back to voxels."""
        out = arr.reshape(arr.shape[:-1] + self.counts)
        for a in range(3):
            out = np.repeat(out, self.lengths(a), axis=out.ndim - 3 + a)
        return out


def region_sums(x, weight: np.ndarray, partition: RegionPartition | None) -> Tensor:
    """``sum(x * weight)`` over the spatial axes, per box -> ``[N, C, k]``.

    ``partition=None`` treats the whole volume as one box.
    """
    x = as_tensor(x)
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), x.shape)
    prod = x.data * w
    if partition is None:
        out = prod.sum(axis=(2, 3, 4))[..., None]
    else:
        partition.check(x.shape[2:])
        out = partition.reduce(prod)

    def backward(g, needs):
        if partition is None:
            return (g[..., 0][..., None, None, None] * w,)
        return (partition.expand(g) * w,)

    return record("region_sums", out, (x,), backward)


def one_hot(labels, num_classes: int) -> np.ndarray:
    """``[N, D, H, W]`` integer labels -> ``[N, C, D, H, W]`` float one-hot."""
    labels = np.asarray(labels)
    _check_labels(labels, num_classes)
    return np.moveaxis(np.eye(num_classes)[labels], -1, 1)


def _check_labels(labels, num_classes):
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels outside [0, {num_classes}): "
                        f"range [{labels.min()}, {labels.max()}]")


def _check_probs(prob: Tensor, target: np.ndarray):
    if prob.ndim != 5:
        raise ShapeError(f"expected [N, C, D, H, W] probabilities, got {prob.shape}")
    if target.shape != prob.shape:
        raise ShapeError(f"target {target.shape} does not match prediction {prob.shape}")
    if prob.shape[1] < 2:
        raise ShapeError("need a background and at least one foreground class")
    lo, hi = prob.data.min(), prob.data.max()
    if lo < -PROB_TOLERANCE or hi > 1 + PROB_TOLERANCE:
        raise ContractError(f"probabilities outside [0, 1]: [{lo}, {hi}]")


def soft_counts(prob, target, partition: RegionPartition | None = None):
    """Foreground ``(TP, sum p, sum y)`` per item, class and box.

    TP and ``sum p`` are tensors of shape ``[N, C-1, k]``; ``sum y`` is a constant
    array of the same shape.
    """
    prob = as_tensor(prob)
    target = np.asarray(target, dtype=np.float64)
    _check_probs(prob, target)
    fg = prob[:, 1:]
    y = target[:, 1:]
    tp = region_sums(fg, y, partition)
    sp = region_sums(fg, 1.0, partition)
    if partition is None:
        sy = y.sum(axis=(2, 3, 4))[..., None]
    else:
        sy = partition.reduce(y)
    return tp, sp, sy


def _ratio_loss(num, den, eps):
    """``1 - (num + eps) / (den + eps)`` elementwise."""
    return sub(1.0, div(add(num, eps), add(den, eps)))


def _reduce(terms: Tensor, normalize: bool) -> Tensor:
    per_item = tsum(terms, axis=-1)
    if normalize:
        per_item = div(per_item, terms.shape[-1])
    return mean(per_item)


def dice_loss(prob, target, eps: float = 1e-5) -> Tensor:
    """Soft Dice loss averaged over foreground classes and batch."""
    return region_dice_loss(prob, target, None, eps)


def region_dice_loss(prob, target, partition: RegionPartition | None, eps: float = 1e-5,
                     normalize: bool = False) -> Tensor:
    tp, sp, sy = soft_counts(prob, target, partition)
    terms = _ratio_loss(mul(tp, 2.0), add(sp, sy), eps)
    return _reduce(terms, normalize)


def tversky_loss(prob, target, alpha=0.3, beta=0.7, eps: float = 1e-5) -> Tensor:
    """Tversky loss: ``alpha`` weighs false positives, ``beta`` false negatives."""
    return region_tversky_loss(prob, target, None, alpha, beta, eps)


def region_tversky_loss(prob, target, partition: RegionPartition | None, alpha=0.3,
                        beta=0.7, eps: float = 1e-5, normalize: bool = False) -> Tensor:
    """Tversky term per box, summed over boxes.

    ``alpha`` and ``beta`` may be scalars or arrays broadcastable to
    ``[C-1, k]`` (per foreground class and box).
    """
    a, b = np.asarray(alpha, dtype=np.float64), np.asarray(beta, dtype=np.float64)
    if np.any(a < 0) or np.any(b < 0):
        raise ConfigurationError("alpha and beta must be non-negative")
    tp, sp, sy = soft_counts(prob, target, partition)
    fp = sub(sp, tp)
    fn = sub(sy, tp)
    den = add(add(tp, mul(fp, a)), mul(fn, b))
    terms = _ratio_loss(tp, den, eps)
    return _reduce(terms, normalize)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[N, C, ...]`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    C = logits.shape[1]
    _check_labels(labels, C)
    logp = special.log_softmax(logits.data, axis=1)
    picked = np.take_along_axis(logp, labels[:, None], axis=1)
    count = labels.size
    out = np.asarray(-picked.sum() / count)

    def backward(g, needs):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[:, None],
                          np.take_along_axis(grad, labels[:, None], axis=1) - 1.0, axis=1)
        return (grad * (g / count),)

    return record("cross_entropy", out, (logits,), backward)


@dataclass(frozen=True)
class LossConfig:
    """Loss selection and coefficients.

    ``variant="compound"`` adds cross-entropy to every term in
    ``compound_with``. Region variants split each volume into
    ``region_splits`` boxes per axis (see :meth:`RegionPartition.from_splits`).
    """

    variant: str = "compound"
    alpha: float = 0.3
    beta: float = 0.7
    eps: float = 1e-5
    region_splits: tuple = (4, 4, 4)
    normalize_regions: bool = False
    adaptive: bool = False
    compound_with: tuple = ("region-tversky",)
    scale_weights: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "region_splits", tuple(self.region_splits))
        object.__setattr__(self, "compound_with", tuple(self.compound_with))
        if self.scale_weights is not None:
            object.__setattr__(self, "scale_weights", tuple(float(w) for w in self.scale_weights))
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown loss variant {self.variant!r}")
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        bad = [t for t in self.compound_with if t not in OVERLAP_TERMS]
        if bad or (self.variant == "compound" and not self.compound_with):
            raise ConfigurationError(f"invalid compound terms {self.compound_with}")
        if any("tversky" in t for t in self.terms) and abs(self.alpha + self.beta - 1) > 1e-12:
            raise ConfigurationError(
                f"Tversky variants need alpha + beta = 1, got {self.alpha} + {self.beta}")

    @property
    def terms(self) -> tuple:
        """Overlap terms this configuration evaluates."""
        if self.variant == "compound":
            return self.compound_with
        if self.variant == "cross-entropy":
            return ()
        return (self.variant,)

    @property
    def uses_ce(self) -> bool:
        return self.variant in ("compound", "cross-entropy")

    def replace(self, **kw) -> "LossConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown loss config keys {sorted(unknown)}")
        return cls(**d)


# Loss ablation ladder: CE + Dice, region Dice, plus region Tversky, adaptive.
LOSS_LADDER = {
    "baseline": LossConfig(compound_with=("dice",)),
    "baseline-rs": LossConfig(compound_with=("region-dice",)),
    "baseline-rs-trs": LossConfig(compound_with=("region-dice", "region-tversky")),
    "adaptive": LossConfig(compound_with=("region-dice", "region-tversky"), adaptive=True),
}


def compound(logits, labels, cfg: LossConfig, alpha_beta=None) -> Tensor:
    """Loss of one scale under ``cfg``.

    ``alpha_beta`` overrides the configured Tversky coefficients, e.g. with
    per-box arrays from :func:`adaptive_alpha_beta`.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    C = logits.shape[1]
    total = cross_entropy(logits, labels) if cfg.uses_ce else None
    if cfg.terms:
        prob = softmax(logits, axis=1)
        target = one_hot(labels, C)
        partition = RegionPartition.from_splits(logits.shape[2:], cfg.region_splits)
        alpha, beta = (cfg.alpha, cfg.beta) if alpha_beta is None else alpha_beta
        for term in cfg.terms:
            part = partition if term.startswith("region") else None
            if term.endswith("dice"):
                val = region_dice_loss(prob, target, part, cfg.eps, cfg.normalize_regions)
            else:
                a, b = _fit_coefficients(alpha, beta, C - 1, 1 if part is None else part.k)
                val = region_tversky_loss(prob, target, part, a, b, cfg.eps,
                                          cfg.normalize_regions)
            total = val if total is None else add(total, val)
    return total


def _fit_coefficients(alpha, beta, classes, k):
    """Per-box coefficients collapse to per-class means when the box count differs."""
    a, b = np.asarray(alpha, dtype=np.float64), np.asarray(beta, dtype=np.float64)
    if a.ndim == 2 and a.shape[1] != k:
        a = a.mean(axis=1, keepdims=True)
        b = b.mean(axis=1, keepdims=True)
    return a, b


def downsample_labels(labels, extents) -> np.ndarray:
    """Nearest-neighbour resampling of ``[N, D, H, W]`` labels to ``extents``."""
    labels = np.asarray(labels)
    idx = [np.minimum(((np.arange(e) + 0.5) * s / e).astype(np.int64), s - 1)
           for e, s in zip(extents, labels.shape[1:])]
    return labels[:, idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]]


def supervise(logits_per_scale, labels, cfg: LossConfig, alpha_beta=None) -> Tensor:
    """Weighted sum of :func:`compound` over decoder scales, full resolution first."""
    logits_per_scale = list(logits_per_scale)
    n = len(logits_per_scale)
    weights = (np.asarray(supervision_weights(n)) if cfg.scale_weights is None
               else np.asarray(cfg.scale_weights, dtype=np.float64))
    if len(weights) != n:
        raise ShapeError(f"{n} scales but {len(weights)} supervision weights")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"supervision weights sum to {weights.sum()}, expected 1")
    labels = np.asarray(labels)
    total = None
    for w, logits in zip(weights, logits_per_scale):
        lab = labels if logits.shape[2:] == labels.shape[1:] else \
            downsample_labels(labels, logits.shape[2:])
        term = mul(compound(logits, lab, cfg, alpha_beta), float(w))
        total = term if total is None else add(total, term)
    return total


@dataclass
class ConfusionCounts:
    """Soft TP/FP/FN per foreground class and box, summed over a window of steps."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    steps: int = 0

    @classmethod
    def empty(cls, classes: int, k: int) -> "ConfusionCounts":
        z = np.zeros((classes, k))
        return cls(z.copy(), z.copy(), z.copy())

    def update(self, prob: np.ndarray, target: np.ndarray, partition: RegionPartition | None):
        """Accumulate counts from ``[N, C, D, H, W]`` probabilities and one-hot targets."""
        p = np.asarray(prob, dtype=np.float64)[:, 1:]
        y = np.asarray(target, dtype=np.float64)[:, 1:]

        def red(a):
            s = a.sum(axis=(2, 3, 4))[..., None] if partition is None else partition.reduce(a)
            return s.sum(axis=0)

        tp = red(p * y)
        self.tp += tp
        self.fp += red(p) - tp
        self.fn += red(y) - tp
        self.steps += 1

    def reset(self):
        for a in (self.tp, self.fp, self.fn):
            a[...] = 0.0
        self.steps = 0


def adaptive_alpha_beta(counts: ConfusionCounts, eps: float = 1e-5, floor: float = 1.0,
                        lo: float = 0.5, hi: float = 0.9):
    """``beta = clip(FN / (FP + FN + eps), lo, hi)`` and ``alpha = 1 - beta``.

    Boxes whose ``FP + FN`` is below ``floor`` soft voxels keep the fixed
    (0.3, 0.7) pair. Arrays have the shape of the counts.
    """
    fp, fn = np.maximum(counts.fp, 0.0), np.maximum(counts.fn, 0.0)
    beta = np.clip(fn / (fp + fn + eps), lo, hi)
    beta = np.where(fp + fn < floor, FIXED_ALPHA_BETA[1], beta)
    alpha = np.where(fp + fn < floor, FIXED_ALPHA_BETA[0], 1.0 - beta)
    return alpha, beta
