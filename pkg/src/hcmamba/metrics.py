"""Confusion-matrix metrics (mIoU, DSC, Acc, Spe, Sen) and HD95 for label masks.

mIoU is the mean IoU over all ``K`` classes, background included. DSC, Sen and
Spe treat class 0 as background and macro-average over the foreground classes
``1..K-1``; with ``K = 2`` this is the binary convention with class 1 as
positive. Accuracy is overall pixel accuracy. A ratio whose denominator is zero
(class absent from both masks) counts as 1.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError, DimensionError
from .losses import boundary_points, directed_distances, image_diagonal


@dataclass
class MetricReport:
    miou: float
    dsc: float
    acc: float
    spe: float
    sen: float
    hd95: float
    per_class_dsc: list[float] = field(default_factory=list)
    per_class_iou: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)

    def row(self) -> str:
        pct = lambda v: f"{100 * v:6.2f}"
        return (f"mIoU {pct(self.miou)}  DSC {pct(self.dsc)}  Acc {pct(self.acc)}  "
                f"Spe {pct(self.spe)}  Sen {pct(self.sen)}  HD95 {self.hd95:.2f}")


def _validate(pred, gt, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    for name, m in (("prediction", pred), ("ground truth", gt)):
        bad = (m < 0) | (m >= num_classes)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise DataError(f"{name} class {m[idx]} at pixel {idx} outside [0, {num_classes})")
    return pred.astype(np.int64), gt.astype(np.int64)


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """``cm[g, p]`` counts pixels of true class ``g`` predicted as ``p``."""
    pred, gt = _validate(pred, gt, num_classes)
    return np.bincount(gt.ravel() * num_classes + pred.ravel(),
                       minlength=num_classes ** 2).reshape(num_classes, num_classes)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    return np.where(den > 0, num / np.where(den > 0, den, 1), 1.0)


def region_metrics(cm: np.ndarray) -> dict:
    total = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    iou = _ratio(tp, tp + fp + fn)
    dsc = _ratio(2 * tp, 2 * tp + fp + fn)
    sen = _ratio(tp, tp + fn)
    spe = _ratio(tn, tn + fp)
    fg = slice(1, None) if len(cm) > 1 else slice(None)
    return dict(miou=float(iou.mean()), dsc=float(dsc[fg].mean()),
                acc=float(tp.sum() / total), spe=float(spe[fg].mean()),
                sen=float(sen[fg].mean()), per_class_dsc=[float(v) for v in dsc],
                per_class_iou=[float(v) for v in iou])


def hd95(pred_mask, gt_mask) -> float:
    """95th percentile (linear interpolation) of both directed boundary-distance sets, pooled."""
    bp, bg = boundary_points(pred_mask), boundary_points(gt_mask)
    if len(bp) == 0 and len(bg) == 0:
        return 0.0
    if len(bp) == 0 or len(bg) == 0:
        return image_diagonal(np.shape(pred_mask))
    shape = np.shape(pred_mask)
    pooled = np.concatenate([directed_distances(bp, bg, shape), directed_distances(bg, bp, shape)])
    return float(np.percentile(pooled, 95))


def image_hd95(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    classes = range(1, num_classes) if num_classes > 1 else range(1)
    return float(np.mean([hd95(pred == k, gt == k) for k in classes]))


def evaluate(pred_mask, gt_mask, num_classes: int) -> MetricReport:
    """Metrics for one ``[H, W]`` mask pair or a stack ``[N, H, W]``.

    Region metrics use the confusion matrix pooled over all pixels; HD95 is the
    mean of the per-image values.
    """
    pred, gt = _validate(pred_mask, gt_mask, num_classes)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.ndim != 3:
        raise DimensionError(f"expected [H, W] or [N, H, W] masks, got {pred.shape}")
    reg = region_metrics(confusion_matrix(pred, gt, num_classes))
    hd = float(np.mean([image_hd95(p, g, num_classes) for p, g in zip(pred, gt)]))
    return MetricReport(hd95=hd, **reg)
