"""Cohort manifests and per-method evaluation.

A cohort manifest is a JSON file::

    {
      "version": 1,
      "cases": [
        {
          "case_id": "case000",
          "scanner": "Skyra",
          "gt": "case000/gt.nii",
          "channels": {"FLAIR": "case000/flair.nii", "MPRAGE": "case000/mprage.nii"},
          "prior": "case000/prior.nii",
          "predictions": {"cascade": "pred/case000_mask.nii"},
          "probabilities": {"cascade": "pred/case000_prob.nii"},
          "tlv_ml": null
        }
      ]
    }

Relative paths resolve against the manifest's directory.  Case order is
significant: it defines the pairing for Wilcoxon tests.  Only ``case_id``
and ``gt`` are required.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from lesionbench.errors import LesionBenchError
from lesionbench.metrics import evaluate_pair, total_lesion_volume_ml
from lesionbench.stats import CohortRecord, check_cohort
from lesionbench.volgrid import read_volume

MANIFEST_VERSION = 1


@dataclass
class ManifestCase:
    case_id: str
    gt: Path
    scanner: str = "unknown"
    channels: dict[str, Path] = field(default_factory=dict)
    prior: Path | None = None
    predictions: dict[str, Path] = field(default_factory=dict)
    probabilities: dict[str, Path] = field(default_factory=dict)
    tlv_ml: float | None = None

    def files(self, methods: Sequence[str] = ()) -> list[Path]:
        out = [self.gt, *self.channels.values()]
        if self.prior is not None:
            out.append(self.prior)
        for m in methods:
            if m in self.predictions:
                out.append(self.predictions[m])
            if m in self.probabilities:
                out.append(self.probabilities[m])
        return out


def load_manifest(path) -> list[ManifestCase]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LesionBenchError("io-error", f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LesionBenchError("corrupt-file", f"manifest {path} is not valid JSON: {exc}") from exc
    base = path.parent

    def resolve(p):
        return None if p is None else Path(os.path.normpath(base / p))

    cases = []
    try:
        for c in raw["cases"]:
            cases.append(
                ManifestCase(
                    case_id=str(c["case_id"]),
                    gt=resolve(c["gt"]),
                    scanner=str(c.get("scanner", "unknown")),
                    channels={k: resolve(v) for k, v in c.get("channels", {}).items()},
                    prior=resolve(c.get("prior")),
                    predictions={k: resolve(v) for k, v in c.get("predictions", {}).items()},
                    probabilities={k: resolve(v) for k, v in c.get("probabilities", {}).items()},
                    tlv_ml=c.get("tlv_ml"),
                )
            )
    except (KeyError, TypeError) as exc:
        raise LesionBenchError("invalid-manifest", f"{path}: {exc}") from exc
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise LesionBenchError("duplicate-case", f"{path} repeats a case_id")
    return cases


def manifest_dict(cases: Sequence[ManifestCase], base_dir) -> dict:
    """Inverse of :func:`load_manifest`, with paths made relative to ``base_dir``."""

    def rel(p):
        return None if p is None else Path(os.path.relpath(p, base_dir)).as_posix()

    out = []
    for c in cases:
        d = {"case_id": c.case_id, "scanner": c.scanner, "gt": rel(c.gt)}
        if c.channels:
            d["channels"] = {k: rel(v) for k, v in c.channels.items()}
        if c.prior is not None:
            d["prior"] = rel(c.prior)
        if c.predictions:
            d["predictions"] = {k: rel(v) for k, v in c.predictions.items()}
        if c.probabilities:
            d["probabilities"] = {k: rel(v) for k, v in c.probabilities.items()}
        if c.tlv_ml is not None:
            d["tlv_ml"] = c.tlv_ml
        out.append(d)
    return {"version": MANIFEST_VERSION, "cases": out}


def methods_of(cases: Sequence[ManifestCase]) -> list[str]:
    """Prediction methods in first-appearance order."""
    seen: dict[str, None] = {}
    for c in cases:
        for m in c.predictions:
            seen.setdefault(m)
    return list(seen)


def missing_files(cases: Sequence[ManifestCase], methods: Sequence[str] = ()) -> list[str]:
    missing = []
    for c in cases:
        for m in methods:
            if m not in c.predictions:
                missing.append(f"{c.case_id}: no prediction for method {m!r}")
        missing.extend(f"{c.case_id}: {p}" for p in c.files(methods) if not Path(p).is_file())
    return missing


def evaluate_method(
    cases: Sequence[ManifestCase],
    method: str,
    connectivity: int = 26,
    min_mm3: float = 0.0,
    filter_pred: bool = True,
    filter_gt: bool = True,
    jobs: int = 1,
) -> list[CohortRecord]:
    """Metrics for every case of one method, in manifest order."""

    def one(c: ManifestCase) -> CohortRecord:
        gt = read_volume(c.gt)
        report = evaluate_pair(
            read_volume(c.predictions[method]),
            gt,
            connectivity,
            min_mm3,
            filter_pred=filter_pred,
            filter_gt=filter_gt,
        )
        tlv = float(c.tlv_ml) if c.tlv_ml is not None else total_lesion_volume_ml(gt, connectivity, min_mm3)
        return CohortRecord(c.case_id, c.scanner, tlv, report)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(one, cases))
    else:
        records = [one(c) for c in cases]
    check_cohort(records)
    return records
