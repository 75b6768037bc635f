"""Confusion-matrix evaluation for binary and semantic change maps.

Per-class scores follow the standard confusion formulas:

    Pre = TP/(TP+FP)              Rec = TP/(TP+FN)
    F1  = 2*Pre*Rec/(Pre+Rec)     IoU = TP/(TP+FN+FP)
    OA  = (TP+TN)/N
    PRE = [(TP+FN)(TP+FP) + (TN+FP)(TN+FN)] / N^2
    Kappa = (OA - PRE)/(1 - PRE)

Degenerate denominators (a class absent from prediction and truth, or
PRE = 1) yield 0 with a ``degenerate`` flag rather than an error, which
keeps macro averages total.  Semantic scoring pools both timestamps into
one confusion per class; macro aggregates are unweighted means over the
configured class list, with an optional pooled multi-class alternative
for OA/Kappa.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp,
                         self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class ClassMetrics:
    f1: float
    iou: float
    precision: float
    recall: float
    oa: float
    kappa: float
    expected_agreement: float
    degenerate: set[str] = field(default_factory=set)


@dataclass
class MetricsReport:
    classes: dict[str, ClassMetrics]
    oa: float
    kappa: float
    macro_f1: float
    macro_iou: float
    macro_oa: float
    macro_kappa: float

    def to_dict(self) -> dict:
        return {
            "classes": {
                name: {
                    "f1": m.f1, "iou": m.iou, "precision": m.precision,
                    "recall": m.recall, "oa": m.oa, "kappa": m.kappa,
                    "degenerate": sorted(m.degenerate),
                } for name, m in self.classes.items()},
            "oa": self.oa, "kappa": self.kappa,
            "macro_f1": self.macro_f1, "macro_iou": self.macro_iou,
            "macro_oa": self.macro_oa, "macro_kappa": self.macro_kappa,
        }

    def to_text(self) -> str:
        """Table with rates as percentages (2 decimals); Kappa stays a ratio."""
        lines = [f"{'class':<16} {'F1':>7} {'IoU':>7} {'Pre':>7} {'Rec':>7} "
                 f"{'OA':>7} {'Kappa':>7}"]
        for name, m in self.classes.items():
            flag = " *" if m.degenerate else ""
            lines.append(
                f"{name:<16} {100 * m.f1:7.2f} {100 * m.iou:7.2f} "
                f"{100 * m.precision:7.2f} {100 * m.recall:7.2f} "
                f"{100 * m.oa:7.2f} {m.kappa:7.4f}{flag}")
        lines.append(
            f"{'average':<16} {100 * self.macro_f1:7.2f} {100 * self.macro_iou:7.2f} "
            f"{'':>7} {'':>7} {100 * self.macro_oa:7.2f} {self.macro_kappa:7.4f}")
        lines.append(f"overall: OA {100 * self.oa:.2f}  Kappa {self.kappa:.4f}")
        return "\n".join(lines)


def _as_binary(arr, what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{what} must be binary, found values {vals[:5]}")
    return arr.astype(bool)


def confusion(pred, gt) -> Confusion:
    """Pixel counts from a binary prediction against a binary ground truth."""
    pred = _as_binary(pred, "prediction")
    gt = _as_binary(gt, "ground truth")
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {gt.shape} differ")
    return Confusion(
        tp=int(np.sum(pred & gt)), fp=int(np.sum(pred & ~gt)),
        fn=int(np.sum(~pred & gt)), tn=int(np.sum(~pred & ~gt)))


def binary_metrics(c: Confusion) -> ClassMetrics:
    """Exact formula evaluation with flagged zeros on degenerate denominators."""
    if c.total <= 0:
        raise ValueError("confusion has no evaluated pixels")
    n = float(c.total)
    flags: set[str] = set()

    def ratio(num, den, name):
        if den == 0:
            flags.add(name)
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    iou = ratio(c.tp, c.tp + c.fn + c.fp, "iou")
    oa = (c.tp + c.tn) / n
    pre = ((c.tp + c.fn) * (c.tp + c.fp) + (c.tn + c.fp) * (c.tn + c.fn)) / (n * n)
    if pre == 1.0:
        flags.add("kappa")
        kappa = 0.0
    else:
        kappa = (oa - pre) / (1.0 - pre)
    return ClassMetrics(f1, iou, precision, recall, oa, kappa, pre, flags)


def binary_report(c: Confusion, class_name: str = "change") -> MetricsReport:
    m = binary_metrics(c)
    return MetricsReport(
        classes={class_name: m}, oa=m.oa, kappa=m.kappa,
        macro_f1=m.f1, macro_iou=m.iou, macro_oa=m.oa, macro_kappa=m.kappa)


def _check_indices(arr, allowed: set[int], what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    present = set(int(v) for v in np.unique(arr))
    unknown = present - allowed - {0}
    if unknown:
        raise ValueError(f"{what} contains unknown class indices {sorted(unknown)}")
    return arr


def multiclass_confusions(pred1, pred2, gt1, gt2,
                          class_ids: dict[int, str]) -> dict[str, Confusion]:
    """One-vs-rest confusion per class, both timestamps pooled."""
    allowed = set(class_ids)
    maps = [_check_indices(m, allowed, w) for m, w in
            ((pred1, "pred T1"), (pred2, "pred T2"), (gt1, "gt T1"), (gt2, "gt T2"))]
    p1, p2, g1, g2 = maps
    if not (p1.shape == p2.shape == g1.shape == g2.shape):
        raise ShapeError("all four maps must share one grid")
    out = {}
    for cid, name in class_ids.items():
        out[name] = (confusion(p1 == cid, g1 == cid)
                     + confusion(p2 == cid, g2 == cid))
    return out


def _pooled_multiclass(pred1, pred2, gt1, gt2, ids: list[int]):
    # single multi-class confusion over both timestamps, background included
    labels = np.array(sorted({0, *ids}), dtype=np.int64)
    k = len(labels)
    mat = np.zeros((k, k), dtype=np.int64)
    for pred, gt in ((pred1, gt1), (pred2, gt2)):
        p = np.searchsorted(labels, np.asarray(pred).reshape(-1).astype(np.int64))
        g = np.searchsorted(labels, np.asarray(gt).reshape(-1).astype(np.int64))
        np.add.at(mat, (g, p), 1)
    n = float(mat.sum())
    po = float(np.trace(mat)) / n
    pe = float(np.sum(mat.sum(axis=0) * mat.sum(axis=1))) / (n * n)
    kappa = 0.0 if pe == 1.0 else (po - pe) / (1.0 - pe)
    return po, kappa


def multiclass_metrics(pred1, pred2, gt1, gt2, class_ids: dict[int, str],
                       aggregate: str = "macro") -> MetricsReport:
    """Per-class one-vs-rest scores plus macro aggregates.

    ``aggregate="macro"`` (default) averages per-class OA/Kappa; ``"pooled"``
    computes them from one pooled multi-class confusion instead.
    """
    per_class = {name: binary_metrics(conf) for name, conf in
                 multiclass_confusions(pred1, pred2, gt1, gt2, class_ids).items()}
    names = list(per_class)
    macro_f1 = float(np.mean([per_class[n].f1 for n in names]))
    macro_iou = float(np.mean([per_class[n].iou for n in names]))
    if aggregate == "macro":
        macro_oa = float(np.mean([per_class[n].oa for n in names]))
        macro_kappa = float(np.mean([per_class[n].kappa for n in names]))
    elif aggregate == "pooled":
        macro_oa, macro_kappa = _pooled_multiclass(
            pred1, pred2, gt1, gt2, list(class_ids))
    else:
        raise ValueError(f"unknown aggregate mode {aggregate!r}")
    return MetricsReport(
        classes=per_class, oa=macro_oa, kappa=macro_kappa,
        macro_f1=macro_f1, macro_iou=macro_iou,
        macro_oa=macro_oa, macro_kappa=macro_kappa)


__all__ = [
    "Confusion", "ClassMetrics", "MetricsReport",
    "confusion", "binary_metrics", "binary_report",
    "multiclass_confusions", "multiclass_metrics",
]
