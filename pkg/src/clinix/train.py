"""Training loop (Adam with polynomial decay), checkpoint conversion and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (ConfigurationError, ConstructionError, DataError, FormatError, ShapeError,
                     TrainingError)
from .losses import (ConfusionCounts, LossConfig, RegionPartition, adaptive_alpha_beta,
                     one_hot, supervise)
from .metrics import SegmentationMetrics, confusion, from_counts, metrics
from .net import Network, NetworkPlan, build, forward, load_plan, preset_plan
from .ops import softmax
from .storage import Checkpoint, save_checkpoint
from .synth import VolumeSample
from .tensor import Tape, backward, no_tape

HISTORY_HEADER = ("epoch", "step", "loss", "lr", "train_dsc", "train_recall", "seconds")


@dataclass
class TrainConfig:
    plan: str = "toy"                   # preset name or path to a plan file
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 1
    steps_per_epoch: int = 200
    lr: float = 1e-4
    poly_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    num_classes: int = 2
    plan_overrides: dict = field(default_factory=dict)
    checkpoint: str | None = None
    metrics_csv: str | None = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigurationError("epochs and steps_per_epoch must be positive")
        if not self.lr > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def resolve_plan(self) -> NetworkPlan:
        try:
            plan = preset_plan(self.plan)
        except ConfigurationError:
            if not Path(self.plan).is_file():
                raise
            plan = load_plan(self.plan)
        return plan.replace(**self.plan_overrides).validate()

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def poly_lr(lr0: float, step: int, total: int, power: float = 0.9) -> float:
    """``lr0 * (1 - step / total) ** power``."""
    return lr0 * (1.0 - step / total) ** power


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        """New parameter arrays; updates run in sorted-name order."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        out = {}
        for name in sorted(params):
            p = params[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            m = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state(self) -> dict:
        rec = {f"m.{k}": v for k, v in self.m.items()}
        rec.update({f"v.{k}": v for k, v in self.v.items()})
        rec["t"] = np.array(float(self.t))
        return rec

    def load_state(self, rec: dict):
        self.m = {k[2:]: np.asarray(v) for k, v in rec.items() if k.startswith("m.")}
        self.v = {k[2:]: np.asarray(v) for k, v in rec.items() if k.startswith("v.")}
        self.t = int(rec.get("t", 0))


# -- checkpoints -------------------------------------------------------------

def network_state(net: Network) -> dict:
    state = {k: t.numpy() for k, t in net.named_parameters()}
    state.update({k: np.array(v) for k, v in net.named_buffers()})
    return state


def to_checkpoint(net: Network, optimizer: Adam | None = None, step: int = 0) -> Checkpoint:
    return Checkpoint(net.plan, network_state(net),
                      optimizer.state() if optimizer else {}, step)


def from_checkpoint(ckpt: Checkpoint) -> Network:
    """Rebuild the network described by ``ckpt`` and load its tensors."""
    t = ckpt.tensors
    if "down0.weight" not in t or "head0.weight" not in t:
        raise FormatError("checkpoint lacks stem or head parameters")
    net = build(ckpt.plan, t["down0.weight"].shape[1], t["head0.weight"].shape[0])
    params = net.parameters()
    missing = set(params) - set(t)
    if missing:
        raise FormatError(f"checkpoint does not match its plan; missing {sorted(missing)[:3]}")
    try:
        net.set_parameters({k: t[k] for k in params})
        net.set_buffers({k: v for k, v in t.items() if k not in params})
    except (KeyError, ShapeError) as exc:
        raise FormatError(f"checkpoint does not match its plan: {exc}") from None
    return net


# -- data --------------------------------------------------------------------

def _check_data(data, plan: NetworkPlan, num_classes: int, in_channels: int | None = None):
    if not data:
        raise DataError("no training samples")
    ch = data[0].image.shape[0] if in_channels is None else in_channels
    for s in data:
        if list(s.extents) != plan.patch_size:
            raise DataError(f"sample {s.id} extents {s.extents} differ from patch "
                            f"{plan.patch_size}")
        if s.image.shape[0] != ch:
            raise DataError(f"sample {s.id} has {s.image.shape[0]} channels, expected {ch}")
        if s.labels.max() >= num_classes:
            raise DataError(f"sample {s.id} has label {s.labels.max()} >= {num_classes}")
    return ch


def _stack(samples):
    return (np.stack([s.image for s in samples]),
            np.stack([s.labels.astype(np.int64) for s in samples]))


@dataclass
class TrainResult:
    net: Network
    checkpoint: Checkpoint
    losses: list          # one value per step
    history: list         # one dict per epoch, keys HISTORY_HEADER
    train_dsc: list       # per step, argmax of the full-resolution head


def train(cfg: TrainConfig, data: list[VolumeSample], plan: NetworkPlan | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    plan = cfg.resolve_plan() if plan is None else plan.validate()
    in_ch = _check_data(data, plan, cfg.num_classes)
    net = build(plan, in_ch, cfg.num_classes, cfg.seed)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 1])
    T = cfg.total_steps
    alpha_beta = None
    partition = RegionPartition.from_splits(plan.patch_size, cfg.loss.region_splits)
    counts = ConfusionCounts.empty(cfg.num_classes - 1, partition.k)
    losses, dsc_curve, history = [], [], []
    order = []
    step = 0
    last_good = to_checkpoint(net, opt, 0)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        epoch_losses, conf = [], np.zeros((3, cfg.num_classes))
        for _ in range(cfg.steps_per_epoch):
            while len(order) < plan.batch_size:
                order.extend(rng.permutation(len(data)).tolist())
            picked, order = order[:plan.batch_size], order[plan.batch_size:]
            x, y = _stack([data[i] for i in picked])
            lr = poly_lr(cfg.lr, step, T, cfg.poly_power)
            net.train()
            try:
                with Tape() as tape:
                    logits = forward(net, x)
                    loss = supervise(logits, y, cfg.loss, alpha_beta)
                grads = backward(loss, tape)
            except ConstructionError as exc:
                _abort(cfg, last_good, step, exc)
            params = net.parameters()
            garr = {k: grads[t].data for k, t in params.items() if t in grads}
            if not all(np.isfinite(g).all() for g in garr.values()):
                _abort(cfg, last_good, step, "non-finite gradient")
            net.set_parameters(opt.step({k: t.data for k, t in params.items()}, garr, lr))
            step += 1

            full = logits[0].data
            pred = full.argmax(axis=1)
            conf += np.stack(confusion(pred, y, cfg.num_classes))
            m = metrics(pred, y, cfg.num_classes)
            dsc_curve.append(m.mean_dsc)
            losses.append(loss.item())
            epoch_losses.append(loss.item())
            if cfg.loss.adaptive:
                with no_tape():
                    prob = softmax(logits[0], axis=1).data
                counts.update(prob, one_hot(y, cfg.num_classes), partition)
        if cfg.loss.adaptive:
            alpha_beta = adaptive_alpha_beta(counts, cfg.loss.eps)
            counts.reset()
        ep_m = from_counts(*conf, total=cfg.steps_per_epoch * y.size)
        row = dict(epoch=epoch, step=step, loss=float(np.mean(epoch_losses)), lr=lr,
                   train_dsc=ep_m.mean_dsc, train_recall=ep_m.mean_recall,
                   seconds=time.perf_counter() - t0)
        history.append(row)
        last_good = to_checkpoint(net, opt, step)
        if cfg.checkpoint:
            save_checkpoint(cfg.checkpoint, last_good)
        if cfg.metrics_csv:
            write_history(cfg.metrics_csv, history)
        if log:
            log(f"epoch {epoch} step {step} loss {row['loss']:.5f} dsc {row['train_dsc']:.4f}")
    return TrainResult(net, last_good, losses, history, dsc_curve)


def _abort(cfg, last_good, step, reason):
    where = ""
    if cfg.checkpoint:
        save_checkpoint(cfg.checkpoint, last_good)
        where = f"; last good state (step {last_good.step}) saved to {cfg.checkpoint}"
    raise TrainingError(f"training diverged at step {step}: {reason}{where}")


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow([row["epoch"], row["step"], f"{row['loss']:.10g}", f"{row['lr']:.10g}",
                        f"{row['train_dsc']:.6f}", f"{row['train_recall']:.6f}",
                        f"{row['seconds']:.3f}"])


# -- evaluation --------------------------------------------------------------

def _tiles(extents, patch):
    grids = [range(0, -(-e // p) * p, p) for e, p in zip(extents, patch)]
    return [(a, b, c) for a in grids[0] for b in grids[1] for c in grids[2]]


def predict(net: Network, image: np.ndarray) -> np.ndarray:
    """Eval-mode argmax labels for a ``[C, D, H, W]`` image of any extents.

    The image is zero-padded to a multiple of the patch and cut into
    non-overlapping patch tiles.
    """
    patch = net.plan.patch_size
    if image.shape[0] != net.in_channels:
        raise DataError(f"image has {image.shape[0]} channels, network expects {net.in_channels}")
    ext = image.shape[1:]
    padded_ext = [-(-e // p) * p for e, p in zip(ext, patch)]
    padded = np.zeros((image.shape[0],) + tuple(padded_ext))
    padded[:, :ext[0], :ext[1], :ext[2]] = image
    out = np.zeros(padded_ext, dtype=np.int64)
    net.eval()
    try:
        with no_tape():
            for a, b, c in _tiles(ext, patch):
                tile = padded[None, :, a:a + patch[0], b:b + patch[1], c:c + patch[2]]
                logits = forward(net, tile)[0].data[0]
                out[a:a + patch[0], b:b + patch[1], c:c + patch[2]] = logits.argmax(axis=0)
    finally:
        net.train()
    return out[:ext[0], :ext[1], :ext[2]]


def evaluate(model, data: list[VolumeSample], num_classes: int | None = None
             ) -> SegmentationMetrics:
    """Metrics pooled over ``data``.

    ``model`` is a :class:`Network`, a :class:`Checkpoint` or a callable mapping
    a ``[C, D, H, W]`` image to ``[K, D, H, W]`` logits.
    """
    if isinstance(model, Checkpoint):
        model = from_checkpoint(model)
    if isinstance(model, Network):
        net = model
        num_classes = net.num_classes

        def labels_of(img):
            return predict(net, img)
    else:
        if num_classes is None:
            raise ConfigurationError("num_classes is required for a plain callable")

        def labels_of(img):
            return np.asarray(model(img)).argmax(axis=0)

    preds, targets = [], []
    for s in data:
        preds.append(labels_of(s.image).ravel())
        targets.append(s.labels.astype(np.int64).ravel())
    return metrics(np.concatenate(preds), np.concatenate(targets), num_classes)
