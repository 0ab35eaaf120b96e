"""Confusion-matrix evaluation: per-class IoU, mIoU and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .synth import CLASS_NAMES, IGNORE_INDEX, read_labels


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray
    ignored_pixels: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), np.int64), 0)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored_pixels + other.ignored_pixels)


def accumulate(cm: ConfusionMatrix, pred_labels, gt_labels, ignore_index=IGNORE_INDEX) -> ConfusionMatrix:
    """Return a new matrix with ``pred_labels`` vs ``gt_labels`` added; gt pixels equal to ignore_index are skipped."""
    pred = np.asarray(pred_labels).astype(np.int64)
    gt = np.asarray(gt_labels).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    c = cm.num_classes
    keep = gt != ignore_index
    if ((gt[keep] < 0) | (gt[keep] >= c)).any():
        raise ValueError("ground-truth class out of range")
    if ((pred[keep] < 0) | (pred[keep] >= c)).any():
        raise ValueError("predicted class out of range")
    counts = np.bincount(gt[keep] * c + pred[keep], minlength=c * c).reshape(c, c)
    return ConfusionMatrix(cm.counts + counts, cm.ignored_pixels + int((~keep).sum()))


def iou_per_class(cm: ConfusionMatrix) -> list[float | None]:
    """IoU_c = TP / (TP + FP + FN); None where the denominator is zero."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(0) + cm.counts.sum(1) - np.diag(cm.counts)
    return [float(tp[c] / denom[c]) if denom[c] > 0 else None for c in range(cm.num_classes)]


def miou(cm: ConfusionMatrix, class_subset=None) -> float:
    ious = iou_per_class(cm)
    subset = range(cm.num_classes) if class_subset is None else class_subset
    vals = [ious[c] for c in subset if ious[c] is not None]
    if not vals:
        raise ValueError("no class with a defined IoU in the requested subset")
    return float(np.mean(vals))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    return float(np.trace(cm.counts) / total) if total else math.nan


def confusion_from_maps(pred_labels, gt_labels, num_classes=len(CLASS_NAMES)) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(num_classes)
    for p, g in zip(pred_labels, gt_labels):
        cm = accumulate(cm, p, g)
    return cm


def evaluate_probabilities(prob_maps, gt_labels) -> ConfusionMatrix:
    """Argmax (N, H, W, C) probability maps and score them against (N, H, W) labels."""
    preds = np.argmax(np.asarray(prob_maps), axis=-1)
    return confusion_from_maps(preds, gt_labels, np.asarray(prob_maps).shape[-1])


def ground_truth(root, split, ids=None) -> np.ndarray:
    """Ground-truth label stack for evaluation; the only sanctioned reader of target-train labels."""
    labels = read_labels(root, split, ids, purpose="metrics")
    return np.stack([labels[i] for i in (sorted(labels) if ids is None else ids)])


def summary(cm: ConfusionMatrix) -> dict:
    return {
        "mIoU": miou(cm),
        "pixel_accuracy": pixel_accuracy(cm),
        "ignored_pixels": cm.ignored_pixels,
        "iou": dict(zip(CLASS_NAMES[:cm.num_classes], iou_per_class(cm))),
    }


def write_report(cm: ConfusionMatrix, out_dir, name="report", class_names=CLASS_NAMES) -> dict:
    """Write ``<name>.csv`` (class, IoU) and ``<name>.json`` (mIoU, pixel accuracy, ignored count)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ious = iou_per_class(cm)
    with open(out_dir / f"{name}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "IoU"])
        for c, v in zip(class_names, ious):
            w.writerow([c, "" if v is None else repr(v)])
    s = {"mIoU": miou(cm), "pixel_accuracy": pixel_accuracy(cm), "ignored_pixels": cm.ignored_pixels}
    (out_dir / f"{name}.json").write_text(json.dumps(s, indent=2, sort_keys=True))
    return s


def plot_class_iou(cm: ConfusionMatrix, path, title="per-class IoU", class_names=CLASS_NAMES):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ious = [v if v is not None else 0.0 for v in iou_per_class(cm)]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(class_names[:len(ious)], ious)
    ax.set_ylim(0, 1)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
