"""Confusion matrices, IoU, the Base/Novel/Average/Weighted mIoU protocol and heatmap export."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, IoError
from .head import ClassPartition

IGNORE_LABEL = 0xFFFF


def confusion_accumulate(pred, gt, n_classes: int, ignore_label: int = IGNORE_LABEL,
                         cm: np.ndarray | None = None) -> np.ndarray:
    """Add ``(gt, pred)`` pixel pairs into a ``K x K`` count matrix (rows = ground truth)."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise DataError(f"{pred.size} predictions vs {gt.size} labels")
    keep = gt != ignore_label
    pred, gt = pred[keep], gt[keep]
    for name, arr in (("prediction", pred), ("label", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DataError(f"{name} outside [0, {n_classes})")
    counts = np.bincount(gt.astype(np.int64) * n_classes + pred.astype(np.int64),
                         minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return counts if cm is None else cm + counts


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """IoU per class; ``nan`` marks classes with an empty union (absent everywhere)."""
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def mean_iou(cm: np.ndarray) -> float:
    """Plain mIoU over the classes present in ``cm``."""
    iou = iou_per_class(cm)
    return float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else float("nan")


def combine_miou(base: float, novel: float,
                 weights: tuple[float, float] = (0.4, 0.6)) -> tuple[float, float]:
    """Average and weighted mIoU from base and novel means.

    ``weights`` are (base, novel) coefficients, 0.4/0.6 by default:
    0.4 * 37.41 + 0.6 * 4.13 = 17.44.
    """
    return (base + novel) / 2.0, weights[0] * base + weights[1] * novel


@dataclass
class MetricsReport:
    per_class_iou: list[float]
    base_miou: float
    novel_miou: float
    average_miou: float
    weighted_miou: float
    pixel_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_iou"] = [None if np.isnan(v) else v for v in self.per_class_iou]
        return d


def aggregate(per_class_iou, partition: ClassPartition, include_background: bool = False,
              weights: tuple[float, float] = (0.4, 0.6), pixel_counts=None) -> MetricsReport:
    """Base/Novel/Average/Weighted mIoU from per-class IoU (any consistent scale).

    Base mIoU averages the base classes present (``nan`` entries skipped);
    background joins only with ``include_background``. Novel mIoU averages
    every novel class, counting absent ones as zero.
    """
    iou = np.asarray(per_class_iou, dtype=np.float64)
    if iou.shape != (partition.n_classes,):
        raise DataError(f"expected {partition.n_classes} IoU values, got {iou.shape}")
    base_ids = ([0] if include_background else []) + list(partition.base_ids)
    base_vals = iou[base_ids]
    base_vals = base_vals[~np.isnan(base_vals)]
    base = float(base_vals.mean()) if base_vals.size else float("nan")
    novel = float(np.nan_to_num(iou[list(partition.novel_ids)], nan=0.0).mean())
    average, weighted = combine_miou(base, novel, weights)
    counts = [] if pixel_counts is None else [int(c) for c in pixel_counts]
    return MetricsReport(per_class_iou=[float(v) for v in iou], base_miou=base,
                         novel_miou=novel, average_miou=average, weighted_miou=weighted,
                         pixel_counts=counts)


def report_from_confusion(cm: np.ndarray, partition: ClassPartition, percent: bool = True,
                          **kwargs) -> MetricsReport:
    scale = 100.0 if percent else 1.0
    return aggregate(iou_per_class(cm) * scale, partition,
                     pixel_counts=np.asarray(cm).sum(axis=1), **kwargs)


# heatmap ----------------------------------------------------------------------

def export_heatmap(matrix) -> list[tuple[int, int, float]]:
    """One ``(row_class, col_class, value)`` record per cell of a mean transition matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    return [(int(i), int(j), float(m[i, j])) for i in range(m.shape[0]) for j in range(m.shape[1])]


def heatmap_matrix(records) -> np.ndarray:
    records = list(records)
    rows = 1 + max(r for r, _, _ in records)
    cols = 1 + max(c for _, c, _ in records)
    m = np.full((rows, cols), np.nan)
    for r, c, v in records:
        m[r, c] = v
    return m


def write_heatmap_csv(path, records, header_comments: dict | None = None) -> None:
    try:
        with open(path, "w", newline="") as fh:
            for key, value in (header_comments or {}).items():
                fh.write(f"# {key}={value}\n")
            writer = csv.writer(fh)
            writer.writerow(["row_class", "col_class", "value"])
            for r, c, v in records:
                writer.writerow([r, c, repr(float(v))])
    except OSError as exc:
        raise IoError(f"cannot write heatmap {path}: {exc}") from exc


def read_heatmap_csv(path) -> list[tuple[int, int, float]]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read heatmap {path}: {exc}") from exc
    body = [ln for ln in lines if not ln.startswith("#")]
    reader = csv.DictReader(body)
    return [(int(row["row_class"]), int(row["col_class"]), float(row["value"])) for row in reader]
