import numpy as np

from lesionbench.volgrid import Volume


def mask(arr, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(np.asarray(arr, dtype=np.uint8), spacing, "mask")


def prob(arr, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(np.asarray(arr, dtype=np.float32), spacing, "prob")


def flat_report(r) -> dict:
    """MetricsReport flattened to the field names used by the set oracle."""
    d = {k: r.metric(k) for k in ("dice", "tp_rate", "ltpr", "lfpr", "vd")}
    d.update(vars(r.counts))
    d.update(pred_volume_mm3=r.pred_volume_mm3, gt_volume_mm3=r.gt_volume_mm3)
    return d
