"""IRSTD evaluation: pixel-level IoU/nIoU, object-level Pd/Fa, ROC and AUC."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .io import atomic_write_text

FA_SCALE = 1e6
DEFAULT_DMAX = 3.0


def binarize(confidence, tau: float = 0.5) -> np.ndarray:
    return np.asarray(confidence) > tau


@dataclass
class Components:
    labels: np.ndarray
    count: int
    centroids: np.ndarray  # (count, 2) as (row, col)
    sizes: np.ndarray


def connected_components(mask) -> Components:
    """8-connected labelling; label k is the k-th region met in raster order."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = kernels.label8(mask)
    if count == 0:
        return Components(labels, 0, np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count + 1)[1:]
    rows, cols = np.indices(mask.shape)
    cy = np.bincount(flat, weights=rows.ravel(), minlength=count + 1)[1:] / sizes
    cx = np.bincount(flat, weights=cols.ravel(), minlength=count + 1)[1:] / sizes
    return Components(labels, count, np.stack([cy, cx], axis=1), sizes)


def _pairs(preds, gts):
    preds = list(preds)
    gts = list(gts)
    if not preds:
        raise ValueError("metrics need at least one sample")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions but {len(gts)} ground truths")
    for p, g in zip(preds, gts):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"prediction {np.shape(p)} and ground truth {np.shape(g)} differ in shape")
    return [(np.asarray(p, dtype=bool), np.asarray(g, dtype=bool)) for p, g in zip(preds, gts)]


def confusion(pred, gt) -> tuple[int, int, int, int]:
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn, pred.size - tp - fp - fn


def _iou(tp, t, p):
    union = t + p - tp
    return 1.0 if union == 0 else tp / union


def pixel_metrics(pred_masks, gt_masks) -> tuple[float, float]:
    """Pooled IoU over the set and nIoU (mean of per-sample IoU).

    A sample with empty prediction and empty ground truth scores 1.
    """
    pairs = _pairs(pred_masks, gt_masks)
    tp_all = t_all = p_all = 0
    per = []
    for p, g in pairs:
        tp = int(np.count_nonzero(p & g))
        t, pp = int(np.count_nonzero(g)), int(np.count_nonzero(p))
        tp_all, t_all, p_all = tp_all + tp, t_all + t, p_all + pp
        per.append(_iou(tp, t, pp))
    return _iou(tp_all, t_all, p_all), float(np.mean(per))


def match_components(pred: Components, gt: Components, d_max: float = DEFAULT_DMAX):
    """Greedy one-to-one matching of centroids, closest pairs first.

    Returns the list of ``(gt_index, pred_index)`` pairs within ``d_max``.
    """
    if pred.count == 0 or gt.count == 0:
        return []
    d = np.linalg.norm(gt.centroids[:, None, :] - pred.centroids[None, :, :], axis=2)
    gi, pi = np.nonzero(d <= d_max)
    order = np.lexsort((pi, gi, d[gi, pi]))
    used_g, used_p, pairs = set(), set(), []
    for k in order:
        g, p = int(gi[k]), int(pi[k])
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        pairs.append((g, p))
    return pairs


@dataclass
class ObjectCounts:
    detected: int = 0
    targets: int = 0
    fa_pixels: int = 0
    pixels: int = 0

    def add(self, other: "ObjectCounts"):
        self.detected += other.detected
        self.targets += other.targets
        self.fa_pixels += other.fa_pixels
        self.pixels += other.pixels

    @property
    def pd(self) -> float:
        return 1.0 if self.targets == 0 else self.detected / self.targets

    @property
    def fa(self) -> float:
        return FA_SCALE * self.fa_pixels / self.pixels if self.pixels else 0.0


def object_counts(pred, gt, d_max: float = DEFAULT_DMAX, gt_components: Components | None = None) -> ObjectCounts:
    pc = connected_components(pred)
    gc = gt_components if gt_components is not None else connected_components(gt)
    pairs = match_components(pc, gc, d_max)
    matched = np.zeros(pc.count, dtype=bool)
    for _, p in pairs:
        matched[p] = True
    fa_pixels = int(pc.sizes[~matched].sum()) if pc.count else 0
    return ObjectCounts(len(pairs), gc.count, fa_pixels, int(np.asarray(pred).size))


def object_metrics(pred_masks, gt_masks, d_max: float = DEFAULT_DMAX) -> tuple[float, float]:
    """Return ``(pd, fa)``; ``fa`` is in units of 1e-6 per pixel.

    A ground-truth target is detected when an unused predicted component has
    its centroid within ``d_max`` pixels; pixels of unmatched predicted
    components are false alarms, divided by all pixels of the set.
    """
    total = ObjectCounts()
    for p, g in _pairs(pred_masks, gt_masks):
        total.add(object_counts(p, g, d_max))
    return total.pd, total.fa


def default_thresholds(n: int = 101) -> np.ndarray:
    return np.linspace(1.0, 0.0, n)


def roc_curve(confidences, gt_masks, thresholds=None, d_max: float = DEFAULT_DMAX):
    """Rows of ``(tau, fa, pd)`` for each threshold."""
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if thresholds.size < 2:
        raise ValueError("ROC needs at least two thresholds")
    diffs = np.diff(thresholds)
    if not (np.all(diffs < 0) or np.all(diffs > 0)):
        raise ValueError("thresholds must be strictly monotone")
    if thresholds.min() < 0 or thresholds.max() > 1:
        raise ValueError("thresholds must lie in [0, 1]")
    pairs = _pairs(confidences, gt_masks)
    confs = [np.asarray(c, dtype=np.float64) for c in confidences]
    gcs = [connected_components(g) for _, g in pairs]
    rows = []
    for tau in thresholds:
        total = ObjectCounts()
        for c, (_, g), gc in zip(confs, pairs, gcs):
            total.add(object_counts(c > tau, g, d_max, gc))
        rows.append((float(tau), total.fa, total.pd))
    return rows


def auc_from_points(points) -> float:
    """Trapezoidal area under Pd(Fa) with Fa normalised by its maximum.

    Points are sorted by Fa and padded with ``(0, 0)`` in front and
    ``(1, pd_at_max_fa)`` at the end, so a curve that never raises Fa still
    spans the unit interval.
    """
    pts = sorted((float(fa), float(pd)) for fa, pd in points)
    fa = np.array([p[0] for p in pts])
    pd = np.array([p[1] for p in pts])
    fa_max = fa.max() if fa.size else 0.0
    x = fa / fa_max if fa_max > 0 else np.zeros_like(fa)
    x = np.concatenate([[0.0], x, [1.0]])
    y = np.concatenate([[0.0], pd, [pd[-1] if pd.size else 0.0]])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def roc_auc(confidences, gt_masks, thresholds=None, d_max: float = DEFAULT_DMAX):
    """Return ``(points, auc)`` where points are ``(fa, pd)`` per threshold."""
    rows = roc_curve(confidences, gt_masks, thresholds, d_max)
    points = [(fa, pd) for _, fa, pd in rows]
    return points, auc_from_points(points)


_SCALARS = ("iou", "niou", "pd", "fa", "tp", "fp", "fn", "tn", "detected", "total_targets", "auc", "tau")
_INTS = {"tp", "fp", "fn", "tn", "detected", "total_targets"}


@dataclass
class MetricsReport:
    iou: float
    niou: float
    pd: float
    fa: float
    tp: int
    fp: int
    fn: int
    tn: int
    detected: int
    total_targets: int
    auc: float = math.nan
    tau: float = 0.5
    roc: list = field(default_factory=list)  # rows of (tau, fa, pd)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name in _SCALARS:
            w.writerow([name, repr(getattr(self, name))])
        return buf.getvalue()

    def roc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "fa", "pd"])
        for row in self.roc:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def save(self, path, roc_path=None):
        atomic_write_text(path, self.to_csv())
        if roc_path is not None:
            atomic_write_text(roc_path, self.roc_csv())

    @classmethod
    def from_csv(cls, text: str, roc_text: str | None = None) -> "MetricsReport":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["metric", "value"]:
            raise ValueError("metrics CSV must start with header 'metric,value'")
        values = {}
        for name, value in rows[1:]:
            values[name] = int(value) if name in _INTS else float(value)
        roc = []
        if roc_text:
            rr = list(csv.reader(io.StringIO(roc_text)))
            roc = [tuple(float(v) for v in r) for r in rr[1:]]
        return cls(**values, roc=roc)

    @classmethod
    def load(cls, path, roc_path=None) -> "MetricsReport":
        roc_text = Path(roc_path).read_text() if roc_path else None
        return cls.from_csv(Path(path).read_text(), roc_text)


def evaluate_masks(confidences, gt_masks, tau: float = 0.5, d_max: float = DEFAULT_DMAX, thresholds=None, with_roc: bool = True) -> MetricsReport:
    """Full report for a set of confidence maps against binary ground truth."""
    confs = [np.asarray(c, dtype=np.float64) for c in confidences]
    gts = [np.asarray(g, dtype=bool) for g in gt_masks]
    preds = [binarize(c, tau) for c in confs]
    iou, niou = pixel_metrics(preds, gts)
    tp = fp = fn = tn = 0
    counts = ObjectCounts()
    for p, g in zip(preds, gts):
        a, b, c, d = confusion(p, g)
        tp, fp, fn, tn = tp + a, fp + b, fn + c, tn + d
        counts.add(object_counts(p, g, d_max))
    report = MetricsReport(iou, niou, counts.pd, counts.fa, tp, fp, fn, tn, counts.detected, counts.targets, tau=float(tau))
    if with_roc:
        rows = roc_curve(confs, gts, thresholds, d_max)
        report.auc = auc_from_points([(fa, pd) for _, fa, pd in rows])
        report.roc = rows
    return report
