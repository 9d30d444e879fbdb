"""Adam with poly decay, the training loop, evaluation and history export."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .diffcore import Tape, Tensor, backward, no_grad
from .io import atomic_write_text
from .losses import LossWeights, total_loss
from .model import Model, forward, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "seg_softiou", "seg_l1", "rec_mse", "total", "val_iou", "val_niou", "val_pd", "val_fa")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch: int = 8
    epochs: int = 400
    poly_power: float = 0.9
    lam: float = 0.1
    seed: int = 0
    eval_tau: float = 0.5
    val_fraction: float = 0.2
    eval_every: int = 1
    grad_clip: float | None = None

    def __post_init__(self):
        for name in ("lr0", "eps", "epochs", "poly_power", "eval_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.lam < 0:
            raise ValueError("weight_decay and lam must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0 when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"loss became {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def poly_lr(epoch: int, total_epochs: int, lr0: float, power: float = 0.9) -> float:
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return lr0 * (1.0 - epoch / total_epochs) ** power


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, hyper: TrainConfig = TrainConfig()):
    """Bias-corrected Adam, in place on ``params`` (name -> Tensor)."""
    missing = [k for k in params if grads.get(k) is None]
    if missing:
        raise ValueError(f"no gradient for parameter {missing[0]!r}")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        if hyper.weight_decay:
            g = g + hyper.weight_decay * p.data
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + hyper.eps)
        p.data -= step.astype(p.dtype, copy=False)
    return params, state


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        s = max_norm / total
        for k in grads:
            grads[k] = grads[k] * s
    return total


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W in [0, 1]
    masks: np.ndarray  # N x H x W bool

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.images.ndim != 3 or self.images.shape != self.masks.shape:
            raise ValueError(f"need matching N x H x W images and masks, got {self.images.shape} and {self.masks.shape}")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.masks[idx])

    @classmethod
    def from_scenes(cls, scenes) -> "Dataset":
        if not scenes:
            return cls(np.zeros((0, 1, 1)), np.zeros((0, 1, 1), dtype=bool))
        return cls(np.stack([s.image for s in scenes]), np.stack([s.mask for s in scenes]))


def _index_hash(i: int, seed: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1, dtype=np.uint64)[0])


def split_indices(n: int, val_fraction: float = 0.2, seed: int = 0):
    """Deterministic split: the ``round(val_fraction * n)`` indices with the smallest hash validate."""
    order = sorted(range(n), key=lambda i: _index_hash(i, seed))
    k = int(round(val_fraction * n))
    val = sorted(order[:k])
    train = sorted(order[k:])
    return train, val


def split(dataset: Dataset, val_fraction: float = 0.2, seed: int = 0):
    tr, va = split_indices(len(dataset), val_fraction, seed)
    return dataset.subset(tr), dataset.subset(va)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict(model: Model, images, batch: int = 8) -> np.ndarray:
    """Confidence maps ``N x H x W`` (float64) without recording a tape."""
    images = np.asarray(images)
    out = []
    with no_grad():
        for s in range(0, images.shape[0], batch):
            x = images[s : s + batch, None].astype(model.dtype)
            conf, _ = forward(model, x)
            out.append(conf.data[:, 0].astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:])


def evaluate(model: Model, dataset: Dataset, tau: float = 0.5, with_roc: bool = True, batch: int = 8) -> metrics.MetricsReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty set")
    confs = predict(model, dataset.images, batch)
    return metrics.evaluate_masks(list(confs), list(dataset.masks), tau=tau, with_roc=with_roc)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_iou: float
    seconds: float
    best_params: dict = field(repr=False, default_factory=dict)

    def history_csv(self) -> str:
        return history_csv(self.history)


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def train_step(model: Model, images, masks, lr: float, state: AdamState, cfg: TrainConfig, weights: LossWeights):
    params = model.parameters()
    x = Tensor(np.asarray(images, dtype=model.dtype)[:, None])
    y = np.asarray(masks, dtype=model.dtype)[:, None]
    with Tape() as tape:
        conf, rec = forward(model, x)
        loss, parts = total_loss(conf, y, rec, x.data, weights)
    value = loss.item()
    if not math.isfinite(value):
        return value, parts
    grads = backward(loss, tape)
    if cfg.grad_clip is not None:
        clip_grads(grads, cfg.grad_clip)
    adam_step(params, grads, state, lr, cfg)
    return value, parts


def train_loop(model: Model, dataset: Dataset, cfg: TrainConfig, val: Dataset | None = None, out_dir=None, restore_best: bool = True) -> TrainResult:
    """Train ``model`` in place.

    Without an explicit ``val`` set, ``dataset`` is split 80/20 by index
    hash. The parameters with the best validation IoU are kept (and written
    to ``out_dir/best.ckpt`` when ``out_dir`` is given); with
    ``restore_best`` they are loaded back into ``model`` at the end.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if val is None:
        dataset, val = split(dataset, cfg.val_fraction, cfg.seed)
    div = model.config.divisor
    h, w = dataset.images.shape[1:]
    if h % div or w % div:
        raise ValueError(f"image size {h}x{w} must be divisible by {div}")
    out = Path(out_dir) if out_dir is not None else None
    weights = LossWeights(lam=cfg.lam)
    params = model.parameters()
    state = AdamState.like(params)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    history = []
    best_iou, best_epoch, best = -math.inf, -1, {}
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg.epochs, cfg.lr0, cfg.poly_power)
        order = rng.permutation(n)
        sums = {"seg_softiou": 0.0, "seg_l1": 0.0, "rec_mse": 0.0, "total": 0.0}
        for b, s in enumerate(range(0, n, cfg.batch)):
            idx = order[s : s + cfg.batch]
            value, parts = train_step(model, dataset.images[idx], dataset.masks[idx], lr, state, cfg, weights)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            k = len(idx)
            for name in parts:
                sums[name] += parts[name] * k
            sums["total"] += value * k
        row = {"epoch": epoch, "lr": lr, **{name: v / n for name, v in sums.items()}}
        last = epoch == cfg.epochs - 1
        if len(val) and (epoch % cfg.eval_every == 0 or last):
            rep = evaluate(model, val, cfg.eval_tau, with_roc=False)
            row.update(val_iou=rep.iou, val_niou=rep.niou, val_pd=rep.pd, val_fa=rep.fa)
            if rep.iou > best_iou:
                best_iou, best_epoch = rep.iou, epoch
                best = {k: p.data.copy() for k, p in params.items()}
                if out is not None:
                    save_checkpoint(model, out / "best.ckpt", {"epoch": epoch, "val_iou": rep.iou, "train": cfg.to_dict()})
        else:
            row.update(val_iou=math.nan, val_niou=math.nan, val_pd=math.nan, val_fa=math.nan)
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f val_iou %.4f", epoch, lr, row["total"], row["val_iou"])
        if out is not None:
            atomic_write_text(out / "history.csv", history_csv(history))
    if not best:
        best = {k: p.data.copy() for k, p in params.items()}
        best_epoch = cfg.epochs - 1
    if restore_best:
        for k, p in params.items():
            p.data[...] = best[k]
    if out is not None:
        save_checkpoint(model, out / "final.ckpt", {"epoch": cfg.epochs - 1, "restored_best": restore_best, "train": cfg.to_dict()})
    return TrainResult(history, best_epoch, best_iou, time.perf_counter() - t0, best)


def smoothed(values, window: int = 10) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window
