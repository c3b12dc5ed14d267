"""Segmentation quality metrics on binary masks (unit pixel spacing)."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyReportError, ShapeError

METRIC_NAMES = ("dice", "iou", "hd95", "asd", "e_measure")


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_score(pred, gt):
    pred, gt = _pair(pred, gt)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, gt).sum() / total


def iou_score(pred, gt):
    pred, gt = _pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return np.logical_and(pred, gt).sum() / union


def boundary(mask):
    """Foreground pixels with at least one face-adjacent background neighbour.

    Pixels on the image border count as touching background.
    """
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def surface_distances(pred, gt):
    """Both directed boundary-to-boundary distance sets, concatenated.

    Returns ``None`` when either mask is empty.
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    bp, bg = boundary(pred), boundary(gt)
    dt_to_gt = ndimage.distance_transform_edt(~bg)
    dt_to_pred = ndimage.distance_transform_edt(~bp)
    return np.concatenate([dt_to_gt[bp], dt_to_pred[bg]])


def hd95(pred, gt):
    """95th percentile of symmetric surface distances; NaN if a mask is empty."""
    d = surface_distances(pred, gt)
    return float("nan") if d is None else float(np.percentile(d, 95))


def asd(pred, gt):
    d = surface_distances(pred, gt)
    return float("nan") if d is None else float(d.mean())


def e_measure(pred, gt):
    """Enhanced-alignment measure, averaged over pixels."""
    pred, gt = _pair(pred, gt)
    fm = pred.astype(np.float64)
    g = gt.astype(np.float64)
    if not gt.any():
        enhanced = 1.0 - fm
    elif gt.all():
        enhanced = fm
    else:
        a_fm = fm - fm.mean()
        a_gt = g - g.mean()
        eps = np.finfo(np.float64).eps
        align = 2.0 * a_gt * a_fm / (a_gt ** 2 + a_fm ** 2 + eps)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


def image_metrics(pred_labels, gt_labels, num_classes=2):
    """All metrics for one label map, averaged over foreground classes."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    per_class = []
    for c in range(1, num_classes):
        p, g = pred_labels == c, gt_labels == c
        per_class.append({
            "dice": float(dice_score(p, g)),
            "iou": float(iou_score(p, g)),
            "hd95": hd95(p, g),
            "asd": asd(p, g),
            "e_measure": e_measure(p, g),
        })
    out = {}
    for name in METRIC_NAMES:
        vals = [m[name] for m in per_class if not math.isnan(m[name])]
        out[name] = float(np.mean(vals)) if vals else float("nan")
    return out


@dataclass
class MetricsReport:
    per_image: list
    aggregate: dict
    excluded: dict = field(default_factory=dict)
    n_images: int = 0

    def to_dict(self):
        return {"n_images": self.n_images, "aggregate": self.aggregate,
                "excluded": self.excluded, "per_image": self.per_image}


def aggregate_report(per_image):
    """Mean of every metric over images; NaN entries are excluded and counted."""
    per_image = list(per_image)
    if not per_image:
        raise EmptyReportError("no per-image metrics to aggregate")
    names = [n for n in METRIC_NAMES if any(n in m for m in per_image)]
    aggregate, excluded = {}, {}
    for name in names:
        vals = [m[name] for m in per_image if name in m]
        kept = [v for v in vals if not math.isnan(v)]
        excluded[name] = len(vals) - len(kept)
        aggregate[name] = float(np.mean(kept)) if kept else float("nan")
    return MetricsReport(per_image=per_image, aggregate=aggregate, excluded=excluded, n_images=len(per_image))
