"""Confusion matrices, per-class IoU and range-binned mIoU."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .geometry import IGNORE

DEFAULT_EDGES = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, math.inf)


class EvalError(ValueError):
    pass


class ConfusionMatrix:
    """``counts[t, p]``: points with ground truth ``t`` predicted as ``p``."""

    def __init__(self, num_classes, counts=None):
        if num_classes < 1:
            raise EvalError("num_classes must be positive")
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes):
            raise EvalError(f"counts shape {counts.shape} for {num_classes} classes")
        self.counts = counts

    def __add__(self, other):
        return merge([self, other])

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def accumulate_confusion(cm, pred, truth):
    """Add ``(pred, truth)`` pairs to ``cm`` in place; IGNORE truths are skipped."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise EvalError(f"{pred.size} predictions for {truth.size} labels")
    keep = truth != IGNORE
    p, t = pred[keep].astype(np.int64), truth[keep].astype(np.int64)
    S = cm.num_classes
    if np.any((t < 0) | (t >= S)) or np.any((p < 0) | (p >= S)):
        raise EvalError(f"class ids outside 0..{S - 1}")
    cm.counts += np.bincount(t * S + p, minlength=S * S).reshape(S, S)
    return cm


def confusion_from(pred, truth, num_classes):
    return accumulate_confusion(ConfusionMatrix(num_classes), pred, truth)


def merge(matrices):
    matrices = list(matrices)
    if not matrices:
        raise EvalError("nothing to merge")
    S = matrices[0].num_classes
    if any(m.num_classes != S for m in matrices):
        raise EvalError("cannot merge matrices of different sizes")
    return ConfusionMatrix(S, sum(m.counts for m in matrices))


@dataclass
class IoUReport:
    iou: np.ndarray      # NaN for classes with an empty union
    present: np.ndarray  # bool, class has a non-zero denominator
    miou: float          # NaN when no class is present
    empty: bool

    def as_rows(self, class_names=None):
        names = class_names or [str(i) for i in range(len(self.iou))]
        return [(i, names[i], self.iou[i], bool(self.present[i])) for i in range(len(self.iou))]


def iou_report(cm):
    if cm.num_classes < 2:
        raise EvalError("IoU report needs at least two classes")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    present = denom > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / denom[present]
    empty = not present.any()
    miou = math.nan if empty else float(iou[present].mean())
    return IoUReport(iou, present, miou, empty)


def check_edges(edges):
    e = np.asarray(edges, dtype=np.float64)
    if e.ndim != 1 or e.size < 2:
        raise EvalError("need at least two bin edges")
    if np.any(np.isnan(e)) or np.any(np.diff(e) <= 0):
        raise EvalError("bin edges must be strictly increasing")
    return e


def bin_index(ranges, edges):
    """Bin ``i`` holds ``edges[i] <= d < edges[i+1]``; -1 outside all bins."""
    e = check_edges(edges)
    d = np.asarray(ranges, dtype=np.float64)
    idx = np.searchsorted(e, d, side="right") - 1
    idx[(d < e[0]) | (d >= e[-1])] = -1
    return idx


def _ranges(cloud_or_ranges):
    r = getattr(cloud_or_ranges, "ranges", cloud_or_ranges)
    return np.asarray(r, dtype=np.float64).reshape(-1)


def distance_binned_confusion(pred, truth, cloud, num_classes, edges=DEFAULT_EDGES):
    """Per-bin confusion matrices; ``cloud`` is a PointCloud or per-point ranges."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    idx = bin_index(_ranges(cloud), edges)
    if idx.shape != truth.shape or pred.shape != truth.shape:
        raise EvalError("predictions, labels and ranges differ in length")
    return [confusion_from(pred[idx == b], truth[idx == b], num_classes)
            for b in range(len(edges) - 1)]


@dataclass
class DistanceBinsReport:
    edges: np.ndarray
    matrices: list
    reports: list

    @property
    def rows(self):
        """``[(lo, hi, mIoU, points)]`` per bin."""
        e = self.edges
        return [(float(e[i]), float(e[i + 1]), r.miou, cm.total)
                for i, (cm, r) in enumerate(zip(self.matrices, self.reports))]

    def total(self):
        return merge(self.matrices)


def distance_binned_miou(pred, truth, cloud, num_classes, edges=DEFAULT_EDGES):
    e = check_edges(edges)
    cms = distance_binned_confusion(pred, truth, cloud, num_classes, e)
    return DistanceBinsReport(e, cms, [iou_report(cm) for cm in cms])


def _fmt(x):
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def iou_csv(report, class_names=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "class_name", "iou", "present"])
    for cid, name, v, present in report.as_rows(class_names):
        w.writerow([cid, name, _fmt(v), int(present)])
    w.writerow(["mean", "miou", _fmt(report.miou), int(not report.empty)])
    return buf.getvalue()


def distance_csv(report):
    rows = report.rows if isinstance(report, DistanceBinsReport) else report
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["range_lo", "range_hi", "miou", "points"])
    for lo, hi, m, n in rows:
        w.writerow([_fmt(lo), _fmt(hi), _fmt(m), n])
    return buf.getvalue()


def confusion_csv(cm):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["truth\\pred"] + list(range(cm.num_classes)))
    for t in range(cm.num_classes):
        w.writerow([t] + cm.counts[t].tolist())
    return buf.getvalue()
