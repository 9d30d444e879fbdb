"""Segmentation (SoftIoU + L1) and reconstruction (MSE) objectives."""
from __future__ import annotations

from dataclasses import dataclass

from .diffcore import Tensor, square, tabs, tsum


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1
    softiou_eps: float = 1e-6

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"loss weight must be >= 0, got {self.lam}")
        if self.softiou_eps <= 0:
            raise ValueError("softiou_eps must be > 0")


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=like.dtype)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def soft_iou_loss(pred: Tensor, target, eps: float = 1e-6) -> Tensor:
    """``1 - (sum p*t + eps) / (sum p + sum t - sum p*t + eps)`` per sample, batch mean."""
    target = _as_tensor(target, pred)
    _same_shape(pred, target, "soft_iou_loss")
    axes = tuple(range(1, pred.ndim))
    inter = tsum(pred * target, axis=axes)
    union = tsum(pred, axis=axes) + tsum(target, axis=axes) - inter
    iou = (inter + eps) / (union + eps)
    return 1.0 - iou.mean()


def l1_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred)
    _same_shape(pred, target, "l1_loss")
    return tabs(pred - target).mean()


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred)
    _same_shape(pred, target, "mse_loss")
    return square(pred - target).mean()


def total_loss(confidence: Tensor, mask, reconstruction: Tensor, image, w: LossWeights = LossWeights()):
    """Return ``(total, parts)``; the reconstruction target is the input image itself."""
    s_iou = soft_iou_loss(confidence, mask, w.softiou_eps)
    s_l1 = l1_loss(confidence, mask)
    rec = mse_loss(reconstruction, image)
    total = s_iou + s_l1 + rec * w.lam
    parts = {"seg_softiou": s_iou.item(), "seg_l1": s_l1.item(), "rec_mse": rec.item()}
    return total, parts
