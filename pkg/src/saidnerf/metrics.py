"""Depth-completion metrics and their per-scene aggregation."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from .errors import DomainError

DELTA_THRESHOLDS = (1.05, 1.10, 1.25)


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    mae: float
    rel: float
    delta_105: float
    delta_110: float
    delta_125: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def compute_metrics(pred, gt, valid=None) -> DepthMetrics:
    """RMSE, MAE, median relative error and delta accuracies over valid pixels.

    ``delta_x`` is the percentage of pixels with ``|pred - gt| / gt <= x - 1``;
    the boundary is inclusive. ``valid`` defaults to ``gt > 0``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DomainError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt > 0 if valid is None else np.asarray(valid, dtype=bool) & (gt > 0)
    if not valid.any():
        raise DomainError("no valid pixels to evaluate")
    p, g = pred[valid], gt[valid]
    err = p - g
    rel = np.abs(err) / g
    # compare against x - 1 computed in a way that keeps exact factors on the boundary
    deltas = [100.0 * np.mean(np.abs(err) <= (x - 1.0) * g * (1 + 1e-12)) for x in DELTA_THRESHOLDS]
    return DepthMetrics(
        rmse=float(np.sqrt(np.mean(err**2))),
        mae=float(np.mean(np.abs(err))),
        rel=float(np.median(rel)),
        delta_105=float(deltas[0]),
        delta_110=float(deltas[1]),
        delta_125=float(deltas[2]),
    )


def aggregate_metrics(per_scene: list[DepthMetrics]) -> DepthMetrics:
    """Unweighted mean of each metric."""
    if not per_scene:
        raise DomainError("nothing to aggregate")
    rows = np.array([astuple(m) for m in per_scene], dtype=np.float64)
    return DepthMetrics(*map(float, np.mean(rows, axis=0)))
