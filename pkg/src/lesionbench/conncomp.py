"""3D connected-component labeling and minimum-lesion-size filtering.

Labeling is delegated to :func:`scipy.ndimage.label` (a two-pass union-find
labeler); labels are then renumbered so that the component containing the
first positive voxel in x-fastest scan order gets id 1, the next new
component id 2, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from lesionbench.errors import LesionBenchError
from lesionbench.volgrid import Volume

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class Lesion:
    id: int
    voxels: np.ndarray = field(repr=False)  # (n, 3) int, x-fastest order
    volume_mm3: float

    @property
    def n_voxels(self) -> int:
        return len(self.voxels)


@dataclass(frozen=True)
class LesionSet:
    """Connected components of a mask.

    ``labels`` is the label grid (0 = background, ids 1..n) matching
    ``lesions``; it is kept so downstream overlap tests stay vectorized.
    """

    lesions: list[Lesion]
    connectivity: int
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    labels: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.lesions)

    def __iter__(self):
        return iter(self.lesions)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def total_volume_mm3(self) -> float:
        return sum(les.volume_mm3 for les in self.lesions)

    @property
    def voxel_counts(self) -> np.ndarray:
        return np.array([les.n_voxels for les in self.lesions], dtype=np.int64)


def structure(connectivity: int) -> np.ndarray:
    if connectivity not in CONNECTIVITY_RANK:
        raise LesionBenchError("invalid-connectivity", f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])


def _lesions_from_labels(labels: np.ndarray, n: int, spacing) -> list[Lesion]:
    flat = labels.ravel(order="F")
    idx = np.flatnonzero(flat)
    lab = flat[idx]
    order = np.argsort(lab, kind="stable")
    coords = np.stack(np.unravel_index(idx[order], labels.shape, order="F"), axis=1)
    counts = np.bincount(lab, minlength=n + 1)[1:]
    vox_mm3 = spacing[0] * spacing[1] * spacing[2]
    groups = np.split(coords, np.cumsum(counts)[:-1]) if n else []
    return [Lesion(i + 1, g, len(g) * vox_mm3) for i, g in enumerate(groups)]


def label_components(m: Volume, connectivity: int = 26) -> LesionSet:
    """Partition the positive voxels of ``m`` into connected lesions."""
    raw, n = ndimage.label(m.data != 0, structure=structure(connectivity))
    labels = np.zeros(m.dims, dtype=np.int32)
    if n:
        flat = raw.ravel(order="F")
        idx = np.flatnonzero(flat)
        _, first = np.unique(flat[idx], return_index=True)
        # np.unique sorts by old label; rank each old label by its first x-fastest position
        lut = np.zeros(n + 1, dtype=np.int32)
        lut[1:][np.argsort(first, kind="stable")] = np.arange(1, n + 1, dtype=np.int32)
        labels = lut[raw]
    return LesionSet(_lesions_from_labels(labels, n, m.spacing), connectivity, m.dims, m.spacing, labels)


def filter_min_size(ls: LesionSet, min_mm3: float) -> LesionSet:
    """Keep lesions with ``volume_mm3 >= min_mm3``, renumbered 1..k in order."""
    if not min_mm3 >= 0:
        raise LesionBenchError("invalid-size", f"minimum lesion size must be >= 0, got {min_mm3}")
    keep = [les for les in ls.lesions if les.volume_mm3 >= min_mm3]
    if len(keep) == len(ls.lesions):
        return ls
    lut = np.zeros(len(ls.lesions) + 1, dtype=np.int32)
    for new_id, les in enumerate(keep, start=1):
        lut[les.id] = new_id
    lesions = [Lesion(i, les.voxels, les.volume_mm3) for i, les in enumerate(keep, start=1)]
    return LesionSet(lesions, ls.connectivity, ls.dims, ls.spacing, lut[ls.labels])


def to_mask(ls: LesionSet) -> Volume:
    return Volume((ls.labels > 0).astype(np.uint8), ls.spacing, "mask")
