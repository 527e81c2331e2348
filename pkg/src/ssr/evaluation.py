"""Pseudo-label generation and segmentation metrics.

Mask encoding everywhere: 0 = background, c+1 = foreground class c,
255 = ignore.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IGNORE = 255


def cam_to_pseudo_label(cam, labels, bg_thresh=0.45):
    """Argmax over class channels, background where the max activation does
    not exceed bg_thresh. `labels[i]` is the dataset class of channel i."""
    cam = np.asarray(cam, dtype=np.float64)
    labels = list(labels)
    if len(labels) == 0:
        raise ValueError("empty label list")
    if cam.ndim != 3 or cam.shape[0] != len(labels):
        raise ValueError(f"cam must be [{len(labels)}, h, w], got shape {cam.shape}")
    winner = np.argmax(cam, axis=0)
    peak = np.max(cam, axis=0)
    lut = np.asarray(labels, dtype=np.int64) + 1
    out = lut[winner]
    out[peak <= bg_thresh] = 0
    return out.astype(np.int32)


@dataclass
class ConfusionAccumulator:
    """Confusion counts; rows = ground truth, cols = prediction, 0 = background."""

    num_classes: int  # foreground classes C; matrix is [C+1, C+1]
    matrix: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.matrix is None:
            self.matrix = np.zeros((self.num_classes + 1, self.num_classes + 1), dtype=np.int64)

    @property
    def pixel_count(self):
        return int(self.matrix.sum())

    def merge(self, other):
        return ConfusionAccumulator(self.num_classes, self.matrix + other.matrix)


def accumulate(acc, pred, gt):
    """Add one image's pixels into the confusion matrix; gt == 255 ignored."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    nc = acc.num_classes + 1
    keep = gt != IGNORE
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    if ((p < 0) | (p >= nc)).any() or ((g < 0) | (g >= nc)).any():
        raise ValueError(f"class values outside [0, {nc})")
    acc.matrix += np.bincount(g * nc + p, minlength=nc * nc).reshape(nc, nc)
    return acc


@dataclass(frozen=True)
class MetricReport:
    miou: float
    per_class_iou: np.ndarray   # [C+1], NaN for absent classes
    precision: float
    recall: float
    confusion_ratio: float


def metrics(acc):
    """mIoU over classes present in gt or prediction, macro precision/recall,
    and the confusion ratio: foreground pixels predicted as a *different*
    foreground class, divided by all foreground ground-truth pixels."""
    m = acc.matrix.astype(np.float64)
    if m.sum() == 0:
        raise ValueError("no pixels accumulated")
    tp = np.diag(m)
    gt_total = m.sum(axis=1)
    pred_total = m.sum(axis=0)
    union = gt_total + pred_total - tp
    present = union > 0

    iou = np.full(m.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    miou = float(np.nanmean(iou))

    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(pred_total > 0, tp / pred_total, np.nan)
        rec = np.where(gt_total > 0, tp / gt_total, np.nan)
    prec[~present] = np.nan
    rec[~present] = np.nan
    precision = float(np.nanmean(prec)) if np.isfinite(prec).any() else 0.0
    recall = float(np.nanmean(rec)) if np.isfinite(rec).any() else 0.0

    fg = m[1:, 1:]
    fg_errors = fg.sum() - np.diag(fg).sum()
    fg_gt = m[1:, :].sum()
    confusion_ratio = float(fg_errors / fg_gt) if fg_gt > 0 else 0.0

    return MetricReport(
        miou=miou,
        per_class_iou=iou,
        precision=precision,
        recall=recall,
        confusion_ratio=confusion_ratio,
    )
