"""Voxel- and lesion-wise segmentation metrics for one (prediction, truth) pair.

Rates whose denominator is zero are reported as ``None`` ("undefined"), never
NaN, so aggregates can exclude them explicitly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from lesionbench.conncomp import LesionSet, filter_min_size, label_components
from lesionbench.errors import LesionBenchError
from lesionbench.volgrid import Volume, check_same_grid

METRIC_NAMES = ("dice", "tp_rate", "ltpr", "lfpr", "vd")


@dataclass(frozen=True)
class Counts:
    n_pred_voxels: int
    n_gt_voxels: int
    n_overlap_voxels: int
    n_gt_lesions: int
    n_pred_lesions: int
    n_detected: int
    n_false_lesions: int


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    tp_rate: float | None
    ltpr: float | None
    lfpr: float | None
    vd: float | None
    counts: Counts
    pred_volume_mm3: float
    gt_volume_mm3: float

    @property
    def signed_volume_diff_mm3(self) -> float:
        """Prediction minus ground truth volume (the Bland-Altman sign)."""
        return self.pred_volume_mm3 - self.gt_volume_mm3

    def metric(self, name: str) -> float | None:
        if name not in METRIC_NAMES:
            raise LesionBenchError("invalid-key", f"unknown metric {name!r}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signed_volume_diff_mm3"] = self.signed_volume_diff_mm3
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = {k: v for k, v in d.items() if k != "signed_volume_diff_mm3"}
        d["counts"] = Counts(**d["counts"])
        return cls(**d)


def report_from_counts(c: Counts, voxel_volume_mm3: float) -> MetricsReport:
    """Turn raw overlap counts into the five metrics.

    VD is computed from voxel counts, which equals the mm³ ratio because both
    masks share one grid.
    """
    denom = c.n_pred_voxels + c.n_gt_voxels
    dice = 2 * c.n_overlap_voxels / denom if denom else 1.0
    tp_rate = c.n_overlap_voxels / c.n_gt_voxels if c.n_gt_voxels else None
    ltpr = c.n_detected / c.n_gt_lesions if c.n_gt_lesions else None
    lfpr = c.n_false_lesions / c.n_pred_lesions if c.n_pred_lesions else None
    vd = abs(c.n_pred_voxels - c.n_gt_voxels) / c.n_gt_voxels if c.n_gt_voxels else None
    return MetricsReport(
        dice=dice,
        tp_rate=tp_rate,
        ltpr=ltpr,
        lfpr=lfpr,
        vd=vd,
        counts=c,
        pred_volume_mm3=c.n_pred_voxels * voxel_volume_mm3,
        gt_volume_mm3=c.n_gt_voxels * voxel_volume_mm3,
    )


def _overlap_counts(pred: LesionSet, gt: LesionSet) -> Counts:
    p = pred.labels > 0
    g = gt.labels > 0
    detected = np.unique(gt.labels[p])
    touched = np.unique(pred.labels[g])
    n_pred = len(pred.lesions)
    return Counts(
        n_pred_voxels=int(p.sum()),
        n_gt_voxels=int(g.sum()),
        n_overlap_voxels=int((p & g).sum()),
        n_gt_lesions=len(gt.lesions),
        n_pred_lesions=n_pred,
        n_detected=int((detected > 0).sum()),
        n_false_lesions=n_pred - int((touched > 0).sum()),
    )


def prepare_truth(gt: Volume, connectivity: int = 26, min_mm3: float = 0.0, *, filter_gt: bool = True) -> LesionSet:
    """Label (and size-filter) a ground-truth mask once for repeated evaluation."""
    g = label_components(gt, connectivity)
    return filter_min_size(g, min_mm3) if filter_gt else g


def evaluate_against(
    pred: Volume,
    truth: LesionSet,
    min_mm3: float = 0.0,
    *,
    filter_pred: bool = True,
) -> MetricsReport:
    """Evaluate ``pred`` against a truth already passed through :func:`prepare_truth`."""
    if pred.dims != truth.dims or pred.spacing != truth.spacing:
        raise LesionBenchError("grid-mismatch", f"{pred.dims}@{pred.spacing} vs {truth.dims}@{truth.spacing}")
    p = label_components(pred, truth.connectivity)
    if filter_pred:
        p = filter_min_size(p, min_mm3)
    return report_from_counts(_overlap_counts(p, truth), pred.voxel_volume_mm3)


def evaluate_pair(
    pred: Volume,
    gt: Volume,
    connectivity: int = 26,
    min_mm3: float = 0.0,
    *,
    filter_pred: bool = True,
    filter_gt: bool = True,
) -> MetricsReport:
    """Compare a predicted mask with the ground truth.

    Lesions smaller than ``min_mm3`` are removed from both masks (or only one
    side, via ``filter_pred``/``filter_gt``) before any metric is computed.
    A ground-truth lesion is detected when at least one predicted voxel lies in
    it; a predicted lesion is false when it shares no voxel with the truth.
    """
    check_same_grid(pred, gt)
    truth = prepare_truth(gt, connectivity, min_mm3, filter_gt=filter_gt)
    return evaluate_against(pred, truth, min_mm3, filter_pred=filter_pred)


def total_lesion_volume_ml(m: Volume, connectivity: int = 26, min_mm3: float = 0.0) -> float:
    ls = filter_min_size(label_components(m, connectivity), min_mm3)
    return ls.total_volume_mm3 / 1000.0
