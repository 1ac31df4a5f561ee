"""Standard depth-estimation error metrics.

Convention: inside this module ``gt`` is the reference that REL divides by.
The metric formulas are usually written with the hatted symbol as the
denominator; here the hatted quantity is bound to ground truth, which is
how published benchmark numbers are computed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import as_depth_map
from .losses import EmptyOverlapError

DELTA_BASE = 1.25


@dataclass
class MetricsReport:
    rel: float
    rmse: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, gt, clamp_max: float | None = None) -> MetricsReport:
    pred = as_depth_map(pred)
    gt = as_depth_map(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    mask = pred.valid & gt.valid
    if not mask.any():
        raise EmptyOverlapError()
    d = pred.values[mask]
    ref = gt.values[mask]
    if clamp_max is not None:
        d = np.minimum(d, clamp_max)

    ratio = np.maximum(d / ref, ref / d)
    return MetricsReport(
        rel=float(np.mean(np.abs(d - ref) / ref)),
        rmse=float(np.sqrt(np.mean((d - ref) ** 2))),
        log10=float(np.mean(np.abs(np.log10(d) - np.log10(ref)))),
        delta1=float(np.mean(ratio < DELTA_BASE)),
        delta2=float(np.mean(ratio < DELTA_BASE**2)),
        delta3=float(np.mean(ratio < DELTA_BASE**3)),
        pixel_count=int(mask.sum()),
    )


def aggregate(reports) -> MetricsReport:
    """Combine per-image reports as if all their pixels had been evaluated together.

    RMSE is recombined through the pixel-weighted mean squared error.
    """
    reports = list(reports)
    n = np.array([r.pixel_count for r in reports], dtype=np.float64)
    if n.sum() == 0:
        raise EmptyOverlapError("any evaluated pair")
    wts = n / n.sum()

    def mean(name):
        return float(np.dot(wts, [getattr(r, name) for r in reports]))

    return MetricsReport(
        rel=mean("rel"),
        rmse=float(np.sqrt(np.dot(wts, [r.rmse**2 for r in reports]))),
        log10=mean("log10"),
        delta1=mean("delta1"),
        delta2=mean("delta2"),
        delta3=mean("delta3"),
        pixel_count=int(n.sum()),
    )
