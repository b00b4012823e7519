"""Composite segmentation loss: soft mIoU + soft Dice + boundary distance.

The boundary term is evaluated on the argmax mask, so it contributes to the
reported loss value but carries no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, as_tensor, softmax
from .errors import ContractError, DataError, DimensionError

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    miou: float = 0.4
    dice: float = 0.4
    boundary: float = 0.2

    def __post_init__(self):
        if min(self.miou, self.dice, self.boundary) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.miou + self.dice + self.boundary <= 0:
            raise ContractError("loss weights must not all be zero")


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {labels[idx]} at pixel {idx} outside [0, {num_classes})")
    return np.eye(num_classes, dtype=dtype)[labels]


def _check_pair(probs: Tensor, onehot: np.ndarray) -> None:
    if probs.shape != onehot.shape:
        raise DimensionError(f"probabilities {probs.shape} vs targets {onehot.shape}")


def soft_miou_loss(probs, onehot) -> Tensor:
    """``1 - mean_k Σp·g / Σ(p + g - p·g)``; a class with empty union scores IoU 1."""
    probs = as_tensor(probs)
    g = np.asarray(onehot.data if isinstance(onehot, Tensor) else onehot, dtype=probs.dtype)
    _check_pair(probs, g)
    axes = tuple(range(probs.ndim - 1))
    inter = (probs * g).sum(axis=axes)
    union = (probs + g - probs * g).sum(axis=axes)
    empty = union.data <= 0
    ratio = inter / (union + empty.astype(probs.dtype))
    iou = ratio + empty.astype(probs.dtype)  # empty classes contribute exactly 1
    return 1.0 - iou.mean()


def soft_dice_loss(probs, onehot, eps: float = DICE_EPS) -> Tensor:
    """``1 - mean_k (2Σp·g + eps) / (Σp + Σg + eps)``."""
    probs = as_tensor(probs)
    g = np.asarray(onehot.data if isinstance(onehot, Tensor) else onehot, dtype=probs.dtype)
    _check_pair(probs, g)
    axes = tuple(range(probs.ndim - 1))
    inter = (probs * g).sum(axis=axes)
    denom = probs.sum(axis=axes) + g.sum(axis=axes)
    return 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()


# -- boundaries -----------------------------------------------------------

def boundary_points(mask: np.ndarray) -> np.ndarray:
    """``[n, 2]`` coordinates of foreground pixels with a background 4-neighbour.

    Pixels outside the image count as background.
    """
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def directed_distances(src: np.ndarray, dst: np.ndarray, shape=None) -> np.ndarray:
    """For each point of ``src`` the Euclidean distance to the nearest point of ``dst``.

    Exact, via a Euclidean distance transform of the ``dst`` point set on a grid
    of ``shape`` (by default the bounding box of both sets).
    """
    src, dst = np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)
    if len(dst) == 0:
        raise ContractError("destination point set is empty")
    if shape is None:
        shape = tuple(int(v) + 1 for v in np.concatenate([src, dst]).max(axis=0))
    grid = np.ones(shape, dtype=bool)
    grid[dst[:, 0], dst[:, 1]] = False
    field = ndimage.distance_transform_edt(grid)
    return field[src[:, 0], src[:, 1]]


def image_diagonal(shape) -> float:
    return float(np.hypot(shape[0], shape[1]))


def boundary_loss(pred_mask, gt_mask) -> float:
    """Symmetric mean nearest-boundary distance (pixels).

    The average of the two directed mean distances, so the value is bounded by
    the image diagonal. If exactly one boundary set is empty each directed
    term equals the image diagonal; if both are empty the loss is 0.
    """
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise DimensionError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    bp, bg = boundary_points(pred_mask), boundary_points(gt_mask)
    if len(bp) == 0 and len(bg) == 0:
        return 0.0
    if len(bp) == 0 or len(bg) == 0:
        return image_diagonal(pred_mask.shape)
    shape = pred_mask.shape
    return float(0.5 * (directed_distances(bp, bg, shape).mean()
                        + directed_distances(bg, bp, shape).mean()))


def multiclass_boundary_loss(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Boundary loss averaged over foreground classes and images (``[B, H, W]`` or ``[H, W]``)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    classes = range(1, num_classes) if num_classes > 1 else range(num_classes)
    vals = [boundary_loss(p == k, g == k) for p, g in zip(pred, gt) for k in classes]
    return float(np.mean(vals))


# -- composite ------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: Tensor
    miou: float
    dice: float
    boundary: float


def composite_loss(logits, labels, weights: LossWeights = LossWeights(),
                   return_parts: bool = False):
    """Weighted soft mIoU + soft Dice + boundary loss for ``logits [B, H, W, K]``.

    Only the two soft terms are differentiable; the boundary term enters the
    returned value as a constant.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    onehot = one_hot(labels, k, dtype=logits.dtype)
    probs = softmax(logits, axis=-1)
    l_miou = soft_miou_loss(probs, onehot)
    l_dice = soft_dice_loss(probs, onehot)
    l_bd = multiclass_boundary_loss(logits.data.argmax(axis=-1), labels, k) if weights.boundary else 0.0
    total = weights.miou * l_miou + weights.dice * l_dice + weights.boundary * l_bd
    if return_parts:
        return LossBreakdown(total, l_miou.item(), l_dice.item(), l_bd)
    return total
