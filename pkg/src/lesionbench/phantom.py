"""Seeded synthetic cases with known lesions.

Every case is drawn from its own PCG64 stream keyed by ``(seed, case_index)``
through :class:`numpy.random.SeedSequence`, so cohorts can be generated in
any order or in parallel and still be bit-identical.

Lesions and noise blobs are ellipsoids rasterized by a voxel-center inclusion
test around a voxel-center origin, which keeps each one 6-connected.  Any two
objects are at least ``min_separation`` voxels apart in Chebyshev distance, so
with a separation of 2 or more they never touch, even under 26-connectivity.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from lesionbench.conncomp import label_components
from lesionbench.errors import LesionBenchError
from lesionbench.metrics import Counts, MetricsReport, report_from_counts
from lesionbench.volgrid import Volume

MAX_ATTEMPTS = 10_000


@dataclass(frozen=True)
class ChannelModel:
    name: str
    background_mean: float = 100.0
    background_sd: float = 10.0
    lesion_mean: float = 200.0
    lesion_sd: float = 10.0
    blob_mean: float | None = None  # defaults to lesion_mean
    blob_sd: float | None = None  # defaults to lesion_sd


DEFAULT_CHANNELS = (
    ChannelModel("FLAIR", 100.0, 10.0, 200.0, 10.0),
    ChannelModel("MPRAGE", 150.0, 10.0, 90.0, 10.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (40, 40, 40)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_lesions: int = 8
    radius_range_mm: tuple[float, float] = (1.5, 3.5)
    min_separation: int = 3
    channels: tuple[ChannelModel, ...] = DEFAULT_CHANNELS
    n_noise_blobs: int = 0
    noise_radius_mm: tuple[float, float] = (1.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_lesions < 0 or self.n_noise_blobs < 0:
            raise LesionBenchError("invalid-spec", "object counts must be >= 0")
        for lo, hi in (self.radius_range_mm, self.noise_radius_mm):
            if not 0 < lo <= hi:
                raise LesionBenchError("invalid-spec", f"bad radius range ({lo}, {hi})")
        if self.min_separation < 2:
            raise LesionBenchError("invalid-spec", "min_separation must be >= 2 voxels")
        if not self.channels:
            raise LesionBenchError("invalid-spec", "at least one channel is required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["channels"] = tuple(ChannelModel(**c) for c in d.get("channels", [asdict(c) for c in DEFAULT_CHANNELS]))
        for key in ("dims", "spacing", "radius_range_mm", "noise_radius_mm"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class PhantomCase:
    channels: dict[str, Volume]
    gt: Volume
    noise: Volume
    manifest: dict = field(repr=False)


def case_rng(seed: int, case_index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, case_index])))


def rasterize_ellipsoid(dims, spacing, center, radii_mm):
    """Voxel coordinates (n, 3) whose centers lie inside the ellipsoid, clipped to the grid."""
    center = np.asarray(center, dtype=float)
    spacing = np.asarray(spacing, dtype=float)
    radii = np.asarray(radii_mm, dtype=float)
    half = np.floor(radii / spacing).astype(int)
    lo = np.maximum(np.floor(center).astype(int) - half, 0)
    hi = np.minimum(np.floor(center).astype(int) + half, np.asarray(dims) - 1)
    if np.any(hi < lo):
        return np.zeros((0, 3), dtype=np.int64)
    axes = [np.arange(lo[i], hi[i] + 1) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    q = sum(((g - center[i]) * spacing[i] / radii[i]) ** 2 for i, g in enumerate((gx, gy, gz)))
    inside = q <= 1.0
    pts = np.stack([gx[inside], gy[inside], gz[inside]], axis=1)
    return _fortran_sorted(pts, dims)


def _fortran_sorted(pts: np.ndarray, dims) -> np.ndarray:
    if len(pts) == 0:
        return pts.astype(np.int64)
    flat = np.ravel_multi_index(pts.T, dims, order="F")
    return pts[np.argsort(flat, kind="stable")].astype(np.int64)


def _first_flat(pts: np.ndarray, dims) -> int:
    return int(np.ravel_multi_index(pts[0], dims, order="F"))


def brain_mask(dims) -> np.ndarray:
    """Centered ellipsoid leaving a 1-voxel rim of zero background."""
    c = (np.asarray(dims) - 1) / 2.0
    r = np.maximum(np.asarray(dims) / 2.0 - 1.0, 0.5)
    gx, gy, gz = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    return ((gx - c[0]) / r[0]) ** 2 + ((gy - c[1]) / r[1]) ** 2 + ((gz - c[2]) / r[2]) ** 2 <= 1.0


class _Placer:
    """Rejection sampler that keeps placed objects ``sep`` voxels apart."""

    def __init__(self, dims, spacing, sep: int, allowed: np.ndarray):
        self.dims = tuple(dims)
        self.spacing = tuple(spacing)
        self.sep = sep
        self.forbidden = ~allowed
        self.occupied = np.zeros(self.dims, dtype=bool)

    def fits(self, pts: np.ndarray) -> bool:
        return len(pts) > 0 and not self.forbidden[tuple(pts.T)].any()

    def add(self, pts: np.ndarray) -> None:
        self.occupied[tuple(pts.T)] = True
        w = self.sep - 1
        lo = np.maximum(pts.min(axis=0) - w, 0)
        hi = np.minimum(pts.max(axis=0) + w + 1, self.dims)
        local = np.zeros(tuple(hi - lo), dtype=bool)
        local[tuple((pts - lo).T)] = True
        grown = ndimage.binary_dilation(local, structure=np.ones((2 * w + 1,) * 3, dtype=bool))
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        self.forbidden[sl] |= grown

    def place(self, rng: np.random.Generator, radius_range, what: str):
        candidates = np.argwhere(~self.forbidden)
        for _ in range(MAX_ATTEMPTS):
            if len(candidates) == 0:
                break
            center = candidates[rng.integers(len(candidates))]
            radii = rng.uniform(radius_range[0], radius_range[1], size=3)
            half = np.floor(radii / np.asarray(self.spacing)).astype(int)
            if np.any(center - half < 0) or np.any(center + half >= np.asarray(self.dims)):
                continue  # objects must not be clipped by the grid
            pts = rasterize_ellipsoid(self.dims, self.spacing, center, radii)
            if self.fits(pts):
                self.add(pts)
                return center, radii, pts
        raise LesionBenchError("placement-overflow", f"could not place {what} after {MAX_ATTEMPTS} attempts")


def generate_case(spec: PhantomSpec, case_index: int = 0) -> PhantomCase:
    """Draw one synthetic case: intensity channels, ground-truth mask, noise-blob mask and manifest."""
    rng = case_rng(spec.seed, case_index)
    dims = tuple(int(n) for n in spec.dims)
    brain = brain_mask(dims)
    placer = _Placer(dims, spec.spacing, spec.min_separation, brain)

    lesions = [placer.place(rng, spec.radius_range_mm, "lesion") for _ in range(spec.n_lesions)]
    blobs = [placer.place(rng, spec.noise_radius_mm, "noise blob") for _ in range(spec.n_noise_blobs)]
    # renumber lesions in x-fastest order of their first voxel, matching label_components
    lesions.sort(key=lambda item: _first_flat(item[2], dims))

    gt = np.zeros(dims, dtype=np.uint8)
    for _, _, pts in lesions:
        gt[tuple(pts.T)] = 1
    noise = np.zeros(dims, dtype=np.uint8)
    for _, _, pts in blobs:
        noise[tuple(pts.T)] = 1

    channels = {}
    for ch in spec.channels:
        img = rng.normal(ch.background_mean, ch.background_sd, size=dims)
        les = gt.astype(bool)
        img[les] = rng.normal(ch.lesion_mean, ch.lesion_sd, size=int(les.sum()))
        nz = noise.astype(bool)
        blob_mean = ch.lesion_mean if ch.blob_mean is None else ch.blob_mean
        blob_sd = ch.lesion_sd if ch.blob_sd is None else ch.blob_sd
        img[nz] = rng.normal(blob_mean, blob_sd, size=int(nz.sum()))
        img = np.where(brain, np.maximum(img, 1e-3), 0.0).astype(np.float32)
        channels[ch.name] = Volume(img, spec.spacing, "image")

    vox = float(np.prod(spec.spacing))

    def entry(i, item):
        center, radii, pts = item
        return {
            "id": i,
            "center": [int(c) for c in center],
            "radii_mm": [float(r) for r in radii],
            "n_voxels": int(len(pts)),
            "volume_mm3": len(pts) * vox,
        }

    manifest = {
        "seed": spec.seed,
        "case_index": case_index,
        "dims": list(dims),
        "spacing": list(spec.spacing),
        "channels": [ch.name for ch in spec.channels],
        "lesions": [entry(i, item) for i, item in enumerate(lesions, start=1)],
        "noise_blobs": [entry(i, item) for i, item in enumerate(blobs, start=1)],
        "gt_volume_mm3": int(gt.sum()) * vox,
    }
    return PhantomCase(channels, Volume(gt, spec.spacing, "mask"), Volume(noise, spec.spacing, "mask"), manifest)


def generate_cohort(spec: PhantomSpec, n_cases: int, jobs: int = 1) -> list[PhantomCase]:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda i: generate_case(spec, i), range(n_cases)))
    return [generate_case(spec, i) for i in range(n_cases)]


def probability_from(case: PhantomCase, lesion_prob: float = 0.9, noise_prob: float = 0.3) -> Volume:
    """Probability map that is ``lesion_prob`` on lesions, ``noise_prob`` on noise blobs, 0 elsewhere."""
    p = np.zeros(case.gt.dims, dtype=np.float32)
    p[case.gt.data.astype(bool)] = lesion_prob
    p[case.noise.data.astype(bool)] = noise_prob
    return Volume(p, case.gt.spacing, "prob")


# ---------------------------------------------------------------------------
# Perturbations with predictable metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DropLesion:
    id: int


@dataclass(frozen=True)
class AddBlob:
    radius_mm: float
    center: tuple[int, int, int] | None = None  # None: random valid position


@dataclass(frozen=True)
class ErodeLesion:
    id: int
    iterations: int = 1


def parse_op(d: dict):
    """Build an op from ``{"op": "drop_lesion" | "add_blob" | "erode_lesion", ...}``."""
    kind = d.get("op")
    if kind == "drop_lesion":
        return DropLesion(int(d["id"]))
    if kind == "add_blob":
        center = d.get("center")
        return AddBlob(float(d["radius_mm"]), tuple(int(c) for c in center) if center is not None else None)
    if kind == "erode_lesion":
        return ErodeLesion(int(d["id"]), int(d.get("iterations", 1)))
    raise LesionBenchError("invalid-op", f"unknown perturbation {kind!r}")


@dataclass
class Perturbation:
    mask: Volume
    expected: MetricsReport
    blobs: list[np.ndarray] = field(repr=False)


def _erode(pts: np.ndarray, dims, iterations: int) -> np.ndarray:
    if len(pts) == 0:
        return pts
    lo = pts.min(axis=0) - 1
    shape = tuple(pts.max(axis=0) - lo + 2)
    local = np.zeros(shape, dtype=bool)
    local[tuple((pts - lo).T)] = True
    local = ndimage.binary_erosion(local, structure=ndimage.generate_binary_structure(3, 1), iterations=iterations)
    return _fortran_sorted(np.argwhere(local) + lo, dims)


def _piece_sizes(pts: np.ndarray, spacing, connectivity: int) -> list[int]:
    if len(pts) == 0:
        return []
    lo = pts.min(axis=0)
    local = np.zeros(tuple(pts.max(axis=0) - lo + 1), dtype=np.uint8)
    local[tuple((pts - lo).T)] = 1
    return [les.n_voxels for les in label_components(Volume(local, spacing, "mask"), connectivity)]


def perturb(
    gt: Volume,
    ops,
    seed: int = 0,
    connectivity: int = 26,
    min_separation: int = 2,
    min_mm3: float = 0.0,
) -> Perturbation:
    """Derive a prediction from ``gt`` by dropping, eroding and adding lesions.

    Lesion ids are those of ``label_components(gt, connectivity)``.  Added blobs
    keep ``min_separation`` voxels from everything already in the prediction
    and the truth, so each one is a separate false lesion.  The returned
    ``expected`` report is computed by bookkeeping over the ops alone and
    should equal ``evaluate_pair(mask, gt, connectivity, min_mm3)``.
    """
    ls = label_components(gt, connectivity)
    current = {les.id: les.voxels for les in ls}
    original = dict(current)
    for op in ops:
        if isinstance(op, (DropLesion, ErodeLesion)) and op.id not in current:
            raise LesionBenchError("invalid-lesion-id", f"no lesion {op.id} (have 1..{len(current)})")
        if isinstance(op, DropLesion):
            current[op.id] = current[op.id][:0]
        elif isinstance(op, ErodeLesion):
            current[op.id] = _erode(current[op.id], gt.dims, op.iterations)

    pred = np.zeros(gt.dims, dtype=np.uint8)
    for pts in current.values():
        pred[tuple(pts.T)] = 1

    rng = case_rng(seed, 0)
    placer = _Placer(gt.dims, gt.spacing, min_separation, np.ones(gt.dims, dtype=bool))
    for pts in original.values():
        placer.add(pts)
    blobs = []
    for op in ops:
        if not isinstance(op, AddBlob):
            continue
        if op.center is None:
            _, _, pts = placer.place(rng, (op.radius_mm, op.radius_mm), "blob")
        else:
            pts = rasterize_ellipsoid(gt.dims, gt.spacing, op.center, (op.radius_mm,) * 3)
            if not placer.fits(pts):
                raise LesionBenchError("invalid-blob", f"blob at {op.center} overlaps or touches an existing component")
            placer.add(pts)
        pred[tuple(pts.T)] = 1
        blobs.append(pts)

    vox = gt.voxel_volume_mm3
    n_pred_vox = n_gt_vox = overlap = n_gt = n_pred = detected = false = 0
    for lid, pts in current.items():
        surviving = [s for s in _piece_sizes(pts, gt.spacing, connectivity) if s * vox >= min_mm3]
        n_pred += len(surviving)
        n_pred_vox += sum(surviving)
        if len(original[lid]) * vox >= min_mm3:
            n_gt += 1
            n_gt_vox += len(original[lid])
            overlap += sum(surviving)
            detected += bool(surviving)
        else:
            false += len(surviving)
    for pts in blobs:
        if len(pts) * vox >= min_mm3:
            n_pred += 1
            n_pred_vox += len(pts)
            false += 1
    counts = Counts(n_pred_vox, n_gt_vox, overlap, n_gt, n_pred, detected, false)
    return Perturbation(Volume(pred, gt.spacing, "mask"), report_from_counts(counts, vox), blobs)
