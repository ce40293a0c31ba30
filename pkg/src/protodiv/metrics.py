"""Per-class IoU/Dice segmentation metrics and report tables."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class SegMetrics:
    per_class_iou: dict
    per_class_dice: dict
    miou: float
    mdice: float
    # classes with TP+FP+FN == 0, excluded from the means
    skipped_classes: list = field(default_factory=list)


def confusion_counts(pred, gt, num_classes: int) -> np.ndarray:
    """Exact per-class (TP, FP, FN) counts, shape (C, 3).

    ``pred`` and ``gt`` are integer label maps of identical shape with labels
    in [0, num_classes).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} contains labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, 3), dtype=np.int64)
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        counts[c, 0] = np.count_nonzero(p & g)
        counts[c, 1] = np.count_nonzero(p & ~g)
        counts[c, 2] = np.count_nonzero(~p & g)
    return counts


def metrics_from_counts(counts) -> SegMetrics:
    """IoU = TP/(TP+FP+FN) and Dice = 2TP/(2TP+FP+FN) per class.

    Classes that never occur in either map (all three counts zero) are
    excluded from the means and listed in ``skipped_classes``.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if (counts < 0).any():
        raise ValueError("counts must be nonnegative")
    iou = {}
    dice = {}
    skipped = []
    for c, (tp, fp, fn) in enumerate(counts):
        denom = tp + fp + fn
        if denom == 0:
            skipped.append(c)
            continue
        iou[c] = tp / denom
        dice[c] = 2 * tp / (2 * tp + fp + fn)
    miou = float(np.mean(list(iou.values()))) if iou else 0.0
    mdice = float(np.mean(list(dice.values()))) if dice else 0.0
    return SegMetrics(
        per_class_iou=iou, per_class_dice=dice, miou=miou, mdice=mdice, skipped_classes=skipped
    )


def evaluate_label_maps(preds, gts, num_classes: int) -> SegMetrics:
    """Aggregate counts over paired label maps, then compute the metrics."""
    total = np.zeros((num_classes, 3), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        total += confusion_counts(pred, gt, num_classes)
    return metrics_from_counts(total)


def dice_from_iou(iou: float) -> float:
    return 2.0 * iou / (1.0 + iou)


def metrics_row(label, seg: SegMetrics, num_classes: int, extra=None):
    """Flatten one evaluation into an ordered (column, value) row."""
    row = {"method": label}
    if extra:
        row.update(extra)
    row["miou"] = 100.0 * seg.miou
    row["mdice"] = 100.0 * seg.mdice
    for c in range(num_classes):
        row[f"iou_c{c}"] = 100.0 * seg.per_class_iou.get(c, float("nan"))
    for c in range(num_classes):
        row[f"dice_c{c}"] = 100.0 * seg.per_class_dice.get(c, float("nan"))
    return row


def format_table(rows) -> str:
    """Aligned text table; floats rendered with two decimals."""
    if not rows:
        return "(no rows)\n"
    columns = list(rows[0].keys())

    def render(value):
        if isinstance(value, float):
            return "nan" if np.isnan(value) else f"{value:.2f}"
        return str(value)

    cells = [[render(row.get(col, "")) for col in columns] for row in rows]
    widths = [max(len(col), *(len(line[i]) for line in cells)) for i, col in enumerate(columns)]
    header = "  ".join(col.ljust(widths[i]) for i, col in enumerate(columns))
    divider = "  ".join("-" * w for w in widths)
    body = "\n".join("  ".join(line[i].ljust(widths[i]) for i in range(len(columns))) for line in cells)
    return f"{header}\n{divider}\n{body}\n"


def write_tsv(rows, path):
    """Machine-readable companion to :func:`format_table` (repr-precision floats)."""
    if not rows:
        Path(path).write_text("")
        return
    columns = list(rows[0].keys())
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_tsv_cell(row.get(col, "")) for col in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def _tsv_cell(value):
    if isinstance(value, float):
        # numpy scalars subclass float but repr as np.float64(...); plain
        # float repr keeps the cell parseable and round-trip exact
        return repr(float(value))
    return str(value)
