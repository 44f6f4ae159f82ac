"""Vascular summary metrics over binary vessel maps.

vessel_density is an exact pixel-count ratio, optionally restricted to a
region of interest. fractal_dimension uses origin-anchored box counting:
count the s x s boxes containing at least one vessel pixel for a ladder of
power-of-two sizes, then fit log N(s) against log(1/s); the slope is the
dimension estimate. Inputs are already-thresholded masks; thresholding
belongs to inference.binarize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import VesselMask
from .errors import ConfigurationError, UndefinedMetricError


@dataclass(frozen=True)
class VascularMetrics:
    vessel_density: float
    fractal_dimension: float
    fit_points: tuple[tuple[float, float], ...]  # (log s, log N(s))
    fit_residual: float


def vessel_density(mask: VesselMask, roi: np.ndarray | None = None) -> float:
    """Vessel pixels / counted pixels, exactly; `roi` restricts the count."""
    labels = mask.labels
    if roi is None:
        return int(np.count_nonzero(labels)) / labels.size
    roi = np.asarray(roi)
    if roi.shape != labels.shape:
        raise ConfigurationError(
            f"roi shape {roi.shape} does not match mask shape {labels.shape}"
        )
    inside = roi != 0
    n_inside = int(np.count_nonzero(inside))
    if n_inside == 0:
        raise ConfigurationError("roi contains no pixels")
    return int(np.count_nonzero(labels[inside])) / n_inside


def default_box_sizes(height: int, width: int) -> list[int]:
    """Powers of two from 2 up to min(H, W) / 4."""
    limit = min(height, width) // 4
    sizes, s = [], 2
    while s <= limit:
        sizes.append(s)
        s *= 2
    return sizes


def box_count(labels: np.ndarray, size: int, offset: tuple[int, int] = (0, 0)) -> int:
    """Number of size x size boxes (anchored at `offset`) holding a vessel pixel."""
    oy, ox = offset
    m = labels[oy:, ox:] != 0
    h, w = m.shape
    pad_h, pad_w = (-h) % size, (-w) % size
    if pad_h or pad_w:
        m = np.pad(m, ((0, pad_h), (0, pad_w)))
    blocks = m.reshape(m.shape[0] // size, size, m.shape[1] // size, size)
    return int(np.count_nonzero(blocks.any(axis=(1, 3))))


def fractal_dimension(
    mask: VesselMask,
    box_sizes: list[int] | None = None,
    multi_offset: bool = False,
) -> tuple[float, tuple[tuple[float, float], ...], float]:
    """Box-counting dimension estimate: (slope, fit points, residual).

    Fit points are (log s, log N(s)); the slope is fitted on log(1/s) so a
    space-filling mask trends toward 2 and a line toward 1. `multi_offset`
    averages counts over four grid offsets per size instead of the default
    single origin-anchored grid.
    """
    labels = mask.labels
    if not np.any(labels):
        raise UndefinedMetricError("fractal dimension is undefined for an empty mask")
    if box_sizes is None:
        box_sizes = default_box_sizes(*labels.shape)
    sizes = sorted({int(s) for s in box_sizes})
    if any(s < 1 or s > min(labels.shape) for s in sizes):
        raise ConfigurationError(
            f"box sizes must lie in [1, {min(labels.shape)}], got {sizes}"
        )
    if len(sizes) < 3:
        raise ConfigurationError(f"need at least 3 box sizes, got {len(sizes)}")

    counts = []
    for s in sizes:
        if multi_offset:
            offsets = [(0, 0), (s // 2, 0), (0, s // 2), (s // 2, s // 2)]
            counts.append(float(np.mean([box_count(labels, s, o) for o in offsets])))
        else:
            counts.append(float(box_count(labels, s)))

    log_s = np.log(np.asarray(sizes, dtype=np.float64))
    log_n = np.log(np.asarray(counts, dtype=np.float64))
    coeffs, residuals, *_ = np.polyfit(-log_s, log_n, 1, full=True)
    slope = float(coeffs[0])
    residual = float(residuals[0]) if residuals.size else 0.0
    points = tuple((float(a), float(b)) for a, b in zip(log_s, log_n))
    return slope, points, residual


def compute_metrics(
    mask: VesselMask,
    roi: np.ndarray | None = None,
    box_sizes: list[int] | None = None,
    multi_offset: bool = False,
) -> VascularMetrics:
    density = vessel_density(mask, roi)
    dim, points, residual = fractal_dimension(mask, box_sizes, multi_offset)
    return VascularMetrics(
        vessel_density=density,
        fractal_dimension=dim,
        fit_points=points,
        fit_residual=residual,
    )


def metrics_csv_line(sample_id: str, metrics: VascularMetrics) -> str:
    return (
        f"{sample_id},{metrics.vessel_density:.9g},"
        f"{metrics.fractal_dimension:.9g},{metrics.fit_residual:.9g}"
    )
