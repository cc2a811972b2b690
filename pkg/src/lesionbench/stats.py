"""Cohort-level analysis: ROC sweeps over binarization thresholds, threshold
selection, TLV stratification, the Wilcoxon signed-rank test, Bland-Altman
agreement and grouped median/mean summaries.
"""

from __future__ import annotations

import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from lesionbench.errors import LesionBenchError
from lesionbench.metrics import METRIC_NAMES, MetricsReport, evaluate_against, prepare_truth
from lesionbench.volgrid import Volume, as_probability, binarize, check_same_grid

DEFAULT_GRID = tuple(np.linspace(0.0, 1.0, 51).round(12).tolist())
TLV_GROUPS = ("low", "moderate", "high")


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    lfpr: float | None
    ltpr: float | None
    dice: float
    n_lfpr_excluded: int
    n_ltpr_excluded: int


@dataclass(frozen=True)
class RocCurve:
    points: list[RocPoint]
    min_mm3: float
    mode: str = "mean"

    def rows(self) -> list[dict]:
        return [
            {
                "threshold": p.threshold,
                "lfpr": p.lfpr,
                "ltpr": p.ltpr,
                "dice": p.dice,
                "n_lfpr_excluded": p.n_lfpr_excluded,
                "n_ltpr_excluded": p.n_ltpr_excluded,
            }
            for p in self.points
        ]


def _check_grid(thresholds) -> list[float]:
    grid = [float(t) for t in thresholds]
    if not grid:
        raise LesionBenchError("invalid-grid", "empty threshold grid")
    if any(not 0.0 <= t <= 1.0 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise LesionBenchError("invalid-grid", "thresholds must be strictly increasing within [0, 1]")
    return grid


def _mean_defined(values: Iterable[float | None]) -> tuple[float | None, int]:
    vals = list(values)
    defined = [v for v in vals if v is not None]
    if not defined:
        return None, len(vals)
    return sum(defined) / len(defined), len(vals) - len(defined)


def sweep_reports(
    cases: Sequence[tuple[Volume, Volume]],
    thresholds: Sequence[float],
    min_mm3: float = 0.0,
    connectivity: int = 26,
    jobs: int = 1,
) -> list[list[MetricsReport]]:
    """Per-case, per-threshold metrics; ``result[case][threshold_index]``."""
    if not cases:
        raise LesionBenchError("insufficient-data", "at least one case is required")
    grid = _check_grid(thresholds)

    def one(case):
        prob, gt = case
        check_same_grid(prob, gt)
        prob = as_probability(prob)
        truth = prepare_truth(gt, connectivity, min_mm3)
        return [evaluate_against(binarize(prob, t), truth, min_mm3) for t in grid]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, cases))
    return [one(c) for c in cases]


def roc_sweep(
    cases: Sequence[tuple[Volume, Volume]],
    thresholds: Sequence[float] = DEFAULT_GRID,
    min_mm3: float = 0.0,
    connectivity: int = 26,
    mode: str = "mean",
    jobs: int = 1,
) -> RocCurve:
    """Lesion-wise ROC over a threshold grid.

    In ``"mean"`` mode each point averages per-case LTPR/LFPR over the cases
    where the rate is defined; ``"pooled"`` divides cohort-wide lesion counts
    instead.
    """
    if mode not in ("mean", "pooled"):
        raise LesionBenchError("invalid-mode", f"unknown ROC mode {mode!r}")
    grid = _check_grid(thresholds)
    reports = sweep_reports(cases, grid, min_mm3, connectivity, jobs)
    points = []
    for j, t in enumerate(grid):
        col = [case[j] for case in reports]
        lfpr, n_lfpr_ex = _mean_defined(r.lfpr for r in col)
        ltpr, n_ltpr_ex = _mean_defined(r.ltpr for r in col)
        if mode == "pooled":
            n_pred = sum(r.counts.n_pred_lesions for r in col)
            n_gt = sum(r.counts.n_gt_lesions for r in col)
            lfpr = sum(r.counts.n_false_lesions for r in col) / n_pred if n_pred else None
            ltpr = sum(r.counts.n_detected for r in col) / n_gt if n_gt else None
        dice = sum(r.dice for r in col) / len(col)
        points.append(RocPoint(t, lfpr, ltpr, dice, n_lfpr_ex, n_ltpr_ex))
    return RocCurve(points, float(min_mm3), mode)


def threshold_scores(reports: list[list[MetricsReport]], grid: Sequence[float]) -> list[float]:
    """Equal-weight objective mean(dice) + (1 - mean(lfpr)) per threshold.

    A threshold at which no case has a predicted lesion has no false lesions,
    so its undefined LFPR counts as 0.
    """
    scores = []
    for j in range(len(grid)):
        col = [case[j] for case in reports]
        dice = sum(r.dice for r in col) / len(col)
        lfpr, _ = _mean_defined(r.lfpr for r in col)
        scores.append(dice + (1.0 - (lfpr if lfpr is not None else 0.0)))
    return scores


def optimize_threshold(
    validation: Sequence[tuple[Volume, Volume]],
    grid: Sequence[float] = DEFAULT_GRID,
    min_mm3: float = 0.0,
    connectivity: int = 26,
    jobs: int = 1,
) -> float:
    """Pick the binarization threshold maximizing mean Dice + (1 - mean LFPR).

    Only grid values strictly inside (0, 1) compete when the grid has any; the
    endpoints are degenerate (t = 1 always yields an empty mask).  Ties go to
    the lowest threshold.
    """
    grid = _check_grid(grid)
    interior = [t for t in grid if 0.0 < t < 1.0]
    candidates = interior or grid
    reports = sweep_reports(validation, candidates, min_mm3, connectivity, jobs)
    scores = threshold_scores(reports, candidates)
    best = 0
    for j, s in enumerate(scores):
        if s > scores[best]:
            best = j
    return candidates[best]


# ---------------------------------------------------------------------------
# Cohort records and TLV bins
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CohortRecord:
    case_id: str
    scanner_id: str
    gt_tlv_ml: float
    report: MetricsReport

    def __post_init__(self):
        if not self.gt_tlv_ml >= 0:
            raise LesionBenchError("invalid-record", f"{self.case_id}: TLV must be >= 0")


def check_cohort(cohort: Sequence[CohortRecord]) -> None:
    seen = set()
    for rec in cohort:
        if rec.case_id in seen:
            raise LesionBenchError("duplicate-case", rec.case_id)
        seen.add(rec.case_id)


def tlv_group(tlv_ml: float) -> str:
    """Lesion-load bin: low below 5 ml, moderate 5-15 ml inclusive, high above."""
    if tlv_ml < 5.0:
        return "low"
    if tlv_ml <= 15.0:
        return "moderate"
    return "high"


def stratify_tlv(cohort: Sequence[CohortRecord]) -> dict[str, list[CohortRecord]]:
    groups: dict[str, list[CohortRecord]] = {g: [] for g in TLV_GROUPS}
    for rec in cohort:
        groups[tlv_group(rec.gt_tlv_ml)].append(rec)
    return groups


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    n_effective: int
    statistic: float
    w_plus: float
    w_minus: float
    p_value: float
    method: str
    zero_method: str = "wilcox"
    note: str = ""


def signed_rank_null_cdf(ranks: Sequence[float], w: float) -> float:
    """P(T+ <= w) when each rank carries an independent fair random sign.

    Ranks must be multiples of 0.5 (average ranks always are); the
    distribution is built by exact subset-sum counting on doubled ranks.
    """
    if w < 0:
        return 0.0
    r2 = np.rint(np.asarray(ranks, dtype=float) * 2).astype(np.int64)
    total = int(r2.sum())
    dist = np.zeros(total + 1, dtype=np.float64)
    dist[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist += shifted
    w2 = int(math.floor(2 * w + 1e-9))
    return float(dist[: w2 + 1].sum()) / 2.0 ** len(r2)


def wilcoxon_signed_rank(
    a: Sequence[float],
    b: Sequence[float],
    zero_method: str = "wilcox",
    method: str = "auto",
    exact_max_n: int = 25,
) -> WilcoxonResult:
    """Two-sided paired Wilcoxon signed-rank test of ``a`` against ``b``.

    Parameters
    ----------
    zero_method : {"wilcox", "pratt"}
        ``"wilcox"`` drops zero differences before ranking; ``"pratt"`` ranks
        them and then discards their ranks.
    method : {"auto", "exact", "normal"}
        ``"auto"`` uses the exact null distribution when at most
        ``exact_max_n`` nonzero differences remain, else the normal
        approximation with continuity and tie correction.

    When every difference is zero the result carries ``p_value = 1.0``,
    ``n_effective = 0`` and ``note = "degenerate-no-signal"``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 1:
        raise LesionBenchError("insufficient-data", "need two equal-length, non-empty samples")
    if zero_method not in ("wilcox", "pratt"):
        raise LesionBenchError("invalid-key", f"unknown zero_method {zero_method!r}")
    if method not in ("auto", "exact", "normal"):
        raise LesionBenchError("invalid-key", f"unknown method {method!r}")
    d = a - b
    if zero_method == "wilcox":
        d = d[d != 0]
        ranks = rankdata(np.abs(d))
    else:
        ranks = rankdata(np.abs(d))
        ranks, d = ranks[d != 0], d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0, 0.0, 0.0, 0.0, 1.0, "degenerate", zero_method, "degenerate-no-signal")

    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    use_exact = method == "exact" or (method == "auto" and n <= exact_max_n)
    if use_exact:
        p = 2.0 * signed_rank_null_cdf(ranks, w)
        name = "exact"
    else:
        mean = ranks.sum() / 2.0
        sd = math.sqrt(float((ranks**2).sum()) / 4.0)
        z = (abs(w - mean) - 0.5) / sd
        p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
        name = "normal-approx"
    return WilcoxonResult(n, w, w_plus, w_minus, min(1.0, p), name, zero_method)


# ---------------------------------------------------------------------------
# Bland-Altman
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlandAltman:
    pairs: list[tuple[float, float]]
    means: np.ndarray = field(repr=False)
    diffs: np.ndarray = field(repr=False)
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float

    def points(self) -> list[tuple[float, float]]:
        """(mean of pair, pred - gt) per pair, ready for plotting."""
        return list(zip(self.means.tolist(), self.diffs.tolist()))


def bland_altman(pairs: Sequence[tuple[float, float]]) -> BlandAltman:
    """Agreement between predicted and reference volumes; diffs are pred - gt."""
    if len(pairs) < 2:
        raise LesionBenchError("insufficient-data", "Bland-Altman needs at least 2 pairs")
    arr = np.asarray(pairs, dtype=float)
    pred, gt = arr[:, 0], arr[:, 1]
    diffs = pred - gt
    means = (pred + gt) / 2.0
    mean_diff = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltman(
        pairs=[(float(p), float(g)) for p, g in arr],
        means=means,
        diffs=diffs,
        mean_diff=mean_diff,
        sd_diff=sd,
        loa_low=mean_diff - 1.96 * sd,
        loa_high=mean_diff + 1.96 * sd,
    )


# ---------------------------------------------------------------------------
# Grouped summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    group: str
    metric: str
    statistic: str
    value: float | None
    min: float | None
    max: float | None
    count: int
    n_excluded: int


def _groups(cohort: Sequence[CohortRecord], group_key: str) -> dict[str, list[CohortRecord]]:
    if group_key == "none":
        return {"all": list(cohort)}
    if group_key == "tlv":
        return stratify_tlv(cohort)
    if group_key == "scanner":
        groups: dict[str, list[CohortRecord]] = {}
        for rec in cohort:
            groups.setdefault(rec.scanner_id, []).append(rec)
        return groups
    raise LesionBenchError("invalid-key", f"unknown group key {group_key!r}")


def aggregate(
    cohort: Sequence[CohortRecord],
    group_key: str = "none",
    statistic: str = "median",
    metrics: Sequence[str] = METRIC_NAMES,
) -> list[SummaryRow]:
    """Per-group, per-metric median or mean with (min, max) range and counts.

    Undefined metric values are left out of the statistic and counted in
    ``n_excluded``.
    """
    if not cohort:
        raise LesionBenchError("insufficient-data", "empty cohort")
    if statistic not in ("median", "mean"):
        raise LesionBenchError("invalid-key", f"unknown statistic {statistic!r}")
    check_cohort(cohort)
    rows = []
    for group, recs in _groups(cohort, group_key).items():
        for m in metrics:
            vals = [r.report.metric(m) for r in recs]
            defined = [v for v in vals if v is not None]
            if defined:
                value = statistics.median(defined) if statistic == "median" else sum(defined) / len(defined)
                lo, hi = min(defined), max(defined)
            else:
                value = lo = hi = None
            rows.append(SummaryRow(group, m, statistic, value, lo, hi, len(defined), len(vals) - len(defined)))
    return rows
