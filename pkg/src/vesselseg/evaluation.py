"""Pixel-pooled evaluation: confusion counts, ROC/PR curves, F1 thresholding.

All metrics pool pixels across images (micro-averaging) rather than
averaging per-image numbers. A pixel is predicted vessel iff p >= t.

The ROC sweep visits every distinct predicted probability plus the
sentinels 0 and 1, accumulating integer tp/fp counts; the trapezoidal
area is evaluated in exact integer arithmetic and divided once, which
makes it equal to the pairwise-ranking AUC (ties counted 1/2) up to a
single rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, UndefinedMetricError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def sensitivity(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def specificity(self) -> float:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else 0.0

    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


@dataclass(frozen=True)
class Curve:
    """Threshold-parameterized curve; x/y meaning depends on the curve kind."""
    thresholds: tuple[float, ...]
    x: tuple[float, ...]
    y: tuple[float, ...]

    def __len__(self):
        return len(self.x)


@dataclass(frozen=True)
class EvalReport:
    auc: float
    auprc: float
    sensitivity: float
    specificity: float
    f1: float
    accuracy: float
    threshold: float
    counts: ConfusionCounts
    roc: Curve
    pr: Curve


def _prob_array(obj) -> np.ndarray:
    arr = obj.values if hasattr(obj, "values") else np.asarray(obj, dtype=np.float64)
    return np.asarray(arr, dtype=np.float64)


def _mask_array(obj) -> np.ndarray:
    arr = obj.labels if hasattr(obj, "labels") else np.asarray(obj)
    return np.asarray(arr)


def _pool(probs, masks) -> tuple[np.ndarray, np.ndarray]:
    """Flatten paired prob/mask lists into two 1-d arrays."""
    if len(probs) != len(masks):
        raise ContractError(f"{len(probs)} probability maps vs {len(masks)} masks")
    flat_p, flat_g = [], []
    for i, (p, m) in enumerate(zip(probs, masks)):
        pa, ma = _prob_array(p), _mask_array(m)
        if pa.shape != ma.shape:
            raise ContractError(
                f"pair {i}: probability map {pa.shape} does not match mask {ma.shape}"
            )
        flat_p.append(pa.ravel())
        flat_g.append((ma.ravel() != 0).astype(np.uint8))
    return np.concatenate(flat_p), np.concatenate(flat_g)


def confusion(probs, masks, threshold: float) -> ConfusionCounts:
    """Pooled confusion counts with the vessel-iff-p>=t prediction rule."""
    p, g = _pool(probs, masks)
    pred = p >= threshold
    pos = g == 1
    tp = int(np.count_nonzero(pred & pos))
    fp = int(np.count_nonzero(pred & ~pos))
    fn = int(np.count_nonzero(~pred & pos))
    tn = int(np.count_nonzero(~pred & ~pos))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _sweep(p: np.ndarray, g: np.ndarray):
    """Cumulative integer (tp, fp) after each distinct probability, descending.

    Returns (values_desc, tp_cum, fp_cum, P, N). Raises when only one class
    is present in the ground truth.
    """
    P = int(np.count_nonzero(g))
    N = g.size - P
    if P == 0 or N == 0:
        raise UndefinedMetricError(
            "ground truth contains a single class; ROC/PR areas are undefined"
        )
    order = np.argsort(-p, kind="stable")
    ps, gs = p[order], g[order]
    # last index of each run of equal values = cumulative count at that threshold
    boundary = np.nonzero(np.diff(ps))[0]
    last = np.concatenate([boundary, [ps.size - 1]])
    tp_cum = np.cumsum(gs)[last].astype(np.int64)
    fp_cum = (last + 1) - tp_cum
    return ps[last], tp_cum, fp_cum, P, N


def roc_with_auc(probs, masks) -> tuple[Curve, float]:
    p, g = _pool(probs, masks)
    values, tp_cum, fp_cum, P, N = _sweep(p, g)

    # exact trapezoid from the virtual (0,0) start; integer numerator
    tp_prev = np.concatenate([[0], tp_cum[:-1]])
    fp_prev = np.concatenate([[0], fp_cum[:-1]])
    numer = int(np.sum((fp_cum - fp_prev) * (tp_cum + tp_prev)))
    auc = numer / (2 * P * N)

    thresholds, fps, tps = _curve_points(values, tp_cum, fp_cum)
    if (fps[0], tps[0]) != (0, 0):
        # every prob reached the top threshold; restore the (0,0) origin
        thresholds.insert(0, math.inf)
        fps.insert(0, 0)
        tps.insert(0, 0)
    fpr = tuple(fp / N for fp in fps)
    tpr = tuple(tp / P for tp in tps)
    return Curve(thresholds=tuple(thresholds), x=fpr, y=tpr), auc


def pr_with_auprc(probs, masks) -> tuple[Curve, float]:
    p, g = _pool(probs, masks)
    values, tp_cum, fp_cum, P, _ = _sweep(p, g)

    thresholds, fps, tps = _curve_points(values, tp_cum, fp_cum)
    recall = [tp / P for tp in tps]
    precision = [tp / (tp + fp) if tp + fp else 1.0 for tp, fp in zip(tps, fps)]
    if recall[0] != 0.0:
        # anchor the curve at (0, 1) when the sweep starts mid-curve
        thresholds.insert(0, math.inf)
        recall.insert(0, 0.0)
        precision.insert(0, 1.0)
    area = 0.0
    for i in range(1, len(recall)):
        area += (recall[i] - recall[i - 1]) * (precision[i] + precision[i - 1]) / 2.0
    return Curve(thresholds=tuple(thresholds), x=tuple(recall), y=tuple(precision)), area


def _curve_points(values, tp_cum, fp_cum):
    """Merge sentinel thresholds 0 and 1 into the descending sweep.

    Returns parallel lists (thresholds desc, fp counts, tp counts).
    """
    thresholds, fps, tps = [], [], []

    def counts_at(t: float) -> tuple[int, int]:
        # values are descending; count entries >= t
        idx = int(np.searchsorted(-values, -t, side="right"))
        if idx == 0:
            return 0, 0
        return int(tp_cum[idx - 1]), int(fp_cum[idx - 1])

    sweep = sorted({1.0, 0.0, *(float(v) for v in values)}, reverse=True)
    for t in sweep:
        tp, fp = counts_at(t)
        thresholds.append(t)
        fps.append(fp)
        tps.append(tp)
    return thresholds, fps, tps


def default_grid(probs) -> list[float]:
    """0.01-step grid over [0,1] joined with every distinct predicted value."""
    coarse = {i / 100.0 for i in range(101)}
    for p in probs:
        coarse.update(float(v) for v in np.unique(_prob_array(p)))
    return sorted(coarse)


def best_f1_threshold(probs, masks, grid=None) -> tuple[float, float]:
    """Grid threshold maximizing pooled F1; ties broken toward the lower value."""
    p, g = _pool(probs, masks)
    P = int(np.count_nonzero(g))
    N = g.size - P
    if P == 0 or N == 0:
        raise UndefinedMetricError(
            "ground truth contains a single class; F1 search is undefined"
        )
    if grid is None:
        grid = default_grid([p])
    grid = sorted(float(t) for t in grid)
    if not grid:
        raise ContractError("threshold grid is empty")
    if grid[0] < 0.0 or grid[-1] > 1.0:
        raise ContractError("threshold grid values must lie in [0, 1]")

    order = np.argsort(p, kind="stable")
    ps, gs = p[order], g[order]
    pos_cum = np.cumsum(gs)

    best_t, best_f1 = grid[0], -1.0
    for t in grid:
        idx = int(np.searchsorted(ps, t, side="left"))
        tp = P - (int(pos_cum[idx - 1]) if idx else 0)
        pred_pos = ps.size - idx
        f1 = 2 * tp / (pred_pos + P)
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return best_t, best_f1


def evaluate(model, pairs, threshold: float | None = None) -> EvalReport:
    """Full-image inference on (image, mask) pairs plus the pooled report.

    When `threshold` is None it is selected by F1 search on the same pairs.
    """
    from . import inference

    if not pairs:
        raise ContractError("evaluate needs at least one (image, mask) pair")
    probs = [inference.segment_full(model, image) for image, _ in pairs]
    masks = [mask for _, mask in pairs]

    roc, auc = roc_with_auc(probs, masks)
    pr, auprc = pr_with_auprc(probs, masks)
    if threshold is None:
        threshold, _ = best_f1_threshold(probs, masks)
    counts = confusion(probs, masks, threshold)
    return EvalReport(
        auc=auc,
        auprc=auprc,
        sensitivity=counts.sensitivity(),
        specificity=counts.specificity(),
        f1=counts.f1(),
        accuracy=counts.accuracy(),
        threshold=threshold,
        counts=counts,
        roc=roc,
        pr=pr,
    )


def report_text(report: EvalReport) -> str:
    c = report.counts
    lines = [
        f"threshold    {report.threshold:.4f}",
        f"auc          {report.auc:.6f}",
        f"auprc        {report.auprc:.6f}",
        f"sensitivity  {report.sensitivity:.6f}",
        f"specificity  {report.specificity:.6f}",
        f"f1           {report.f1:.6f}",
        f"accuracy     {report.accuracy:.6f}",
        f"counts       tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn}",
    ]
    return "\n".join(lines) + "\n"


def write_report_csv(report: EvalReport, path) -> None:
    c = report.counts
    header = "threshold,auc,auprc,sensitivity,specificity,f1,accuracy,tp,fp,tn,fn"
    row = (
        f"{report.threshold:.9g},{report.auc:.9g},{report.auprc:.9g},"
        f"{report.sensitivity:.9g},{report.specificity:.9g},{report.f1:.9g},"
        f"{report.accuracy:.9g},{c.tp},{c.fp},{c.tn},{c.fn}"
    )
    Path(path).write_text(header + "\n" + row + "\n")


def write_curve_csv(curve: Curve, path, columns: tuple[str, str]) -> None:
    lines = [f"{columns[0]},{columns[1]}"]
    for x, y in zip(curve.x, curve.y):
        lines.append(f"{x:.9g},{y:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")
