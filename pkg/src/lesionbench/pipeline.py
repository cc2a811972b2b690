"""Two-stage cascade segmentation harness.

The data flow is:

1. histogram-match every intensity channel to a reference case;
2. keep candidate voxels whose first-channel (FLAIR) intensity exceeds a
   fraction of the mean foreground intensity;
3. stage 1 is trained on class-balanced patches centered on candidates;
4. stage 2 is trained on class-balanced patches centered on the voxels stage 1
   calls positive, so it specializes in rejecting stage-1 false positives;
5. the stage-2 probability map is binarized at a threshold chosen on
   validation cases and small components are removed.

Classifiers are pluggable: anything with ``fit(patches, seed)``,
``predict_proba(patches) -> ndarray``, ``to_payload()`` and a
``from_payload`` classmethod, registered in :data:`CLASSIFIERS`.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lesionbench import __version__
from lesionbench.classifier import CLASSIFIERS
from lesionbench.conncomp import filter_min_size, label_components, to_mask
from lesionbench.errors import LesionBenchError
from lesionbench.stats import DEFAULT_GRID, optimize_threshold
from lesionbench.volgrid import Volume, atomic_write, binarize, check_same_grid

MODEL_FORMAT_VERSION = 1
N_QUANTILES = 256
PRIOR = "PRIOR"
PREDICT_CHUNK = 2048
DEFAULT_CANDIDATE_GRID = tuple(np.round(np.arange(0.0, 3.0001, 0.05), 10).tolist())

Channels = Mapping[str, Volume]


# ---------------------------------------------------------------------------
# Intensity normalization and candidate selection
# ---------------------------------------------------------------------------


def foreground_quantiles(v: Volume, n: int = N_QUANTILES) -> np.ndarray:
    """``n + 1`` evenly spaced quantiles of the nonzero voxels."""
    fg = v.data[v.data != 0].astype(np.float64)
    if fg.size == 0:
        raise LesionBenchError("empty-volume", "volume has no foreground (nonzero) voxels")
    return np.quantile(fg, np.linspace(0.0, 1.0, n + 1))


def match_to_quantiles(src: Volume, ref_q: np.ndarray) -> Volume:
    """Remap ``src`` foreground piecewise-linearly so its quantiles land on ``ref_q``."""
    src_q = foreground_quantiles(src, len(ref_q) - 1)
    if src_q[0] == src_q[-1]:
        raise LesionBenchError("degenerate-histogram", "source foreground has constant intensity")
    # repeated source quantiles (atoms) map to the mean of their reference targets
    xs, inverse = np.unique(src_q, return_inverse=True)
    ys = np.bincount(inverse, weights=ref_q) / np.bincount(inverse)
    data = src.data.astype(np.float64)
    fg = data != 0
    out = np.zeros(src.dims, dtype=np.float32)
    out[fg] = np.interp(data[fg], xs, ys)
    return Volume(out, src.spacing, "image")


def histogram_match(src: Volume, ref: Volume) -> Volume:
    """Match the foreground intensity distribution of ``src`` to that of ``ref``.

    Background (zero) voxels stay zero and the mapping is monotone
    non-decreasing.
    """
    return match_to_quantiles(src, foreground_quantiles(ref))


def select_candidates(flair: Volume, t_frac: float) -> Volume:
    """Foreground voxels brighter than ``t_frac`` times the mean foreground intensity."""
    if not t_frac >= 0:
        raise LesionBenchError("invalid-threshold", f"candidate fraction must be >= 0, got {t_frac}")
    fg = flair.data != 0
    if not fg.any():
        raise LesionBenchError("empty-volume", "no foreground voxels")
    level = t_frac * float(flair.data[fg].astype(np.float64).mean())
    return Volume((fg & (flair.data > level)).astype(np.uint8), flair.spacing, "mask")


def choose_candidate_fraction(
    flairs: Sequence[Volume],
    gts: Sequence[Volume],
    grid: Sequence[float] = DEFAULT_CANDIDATE_GRID,
    min_recall: float = 0.95,
) -> float:
    """Largest candidate fraction that keeps ``min_recall`` of lesion voxels.

    The candidate pool must also hold at least as many non-lesion voxels as
    lesion voxels, or class balancing would have no negatives to sample.
    Counts are pooled over cases.
    """
    best = float(grid[0])
    total = sum(int(g.data.sum()) for g in gts)
    if total == 0:
        return best
    for t in grid:
        cands = [select_candidates(f, t).data for f in flairs]
        hit = sum(int((c & g.data).sum()) for c, g in zip(cands, gts))
        n_neg = sum(int(c.sum()) for c in cands) - hit
        if hit / total >= min_recall and n_neg >= hit:
            best = max(best, float(t))
    return best


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchSpec:
    edge: int = 11
    channels: tuple[str, ...] = ("FLAIR", "MPRAGE")

    def __post_init__(self):
        if self.edge < 1 or self.edge % 2 == 0:
            raise LesionBenchError("invalid-patch-spec", f"patch edge must be odd and positive, got {self.edge}")
        if not self.channels:
            raise LesionBenchError("invalid-patch-spec", "at least one channel is required")
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def has_prior(self) -> bool:
        return PRIOR in self.channels

    @property
    def patch_length(self) -> int:
        return self.edge**3 * len(self.channels)


@dataclass(frozen=True)
class Patch:
    center: tuple[int, int, int]
    values: np.ndarray = field(repr=False)  # (c, e, e, e)
    padded: bool
    label: int | None = None


@dataclass
class PatchBatch:
    """A sequence of patches stored as one ``(n, c, e, e, e)`` array."""

    values: np.ndarray
    centers: np.ndarray
    padded: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, i: int) -> Patch:
        label = None if self.labels is None else int(self.labels[i])
        return Patch(tuple(int(c) for c in self.centers[i]), self.values[i], bool(self.padded[i]), label)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "PatchBatch":
        return PatchBatch(
            self.values[idx],
            self.centers[idx],
            self.padded[idx],
            None if self.labels is None else self.labels[idx],
        )


def _as_channel_list(channels) -> list[Volume]:
    return list(channels.values()) if isinstance(channels, Mapping) else list(channels)


def extract_patches(channels, spec: PatchSpec, centers, labels: Volume | None = None) -> PatchBatch:
    """Cut an ``edge``-cube around each center from every channel.

    Voxels outside the grid are zero and the patch's ``padded`` flag is set.
    """
    vols = _as_channel_list(channels)
    if len(vols) != len(spec.channels):
        raise LesionBenchError("channel-mismatch", f"spec lists {len(spec.channels)} channels, got {len(vols)}")
    for v in vols[1:]:
        check_same_grid(vols[0], v)
    if labels is not None:
        check_same_grid(vols[0], labels)
    dims = np.asarray(vols[0].dims)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    if len(centers) and (np.any(centers < 0) or np.any(centers >= dims)):
        raise LesionBenchError("out-of-bounds", "patch centers must lie inside the grid")
    h = spec.edge // 2
    values = np.empty((len(centers), len(vols)) + (spec.edge,) * 3, dtype=np.float32)
    cx, cy, cz = centers.T
    for ch, v in enumerate(vols):
        padded = np.pad(v.data.astype(np.float32), h)
        windows = sliding_window_view(padded, (spec.edge,) * 3)
        values[:, ch] = windows[cx, cy, cz]
    pad_flag = np.any(centers < h, axis=1) | np.any(centers + h >= dims, axis=1)
    lab = None if labels is None else labels.data[cx, cy, cz].astype(np.uint8)
    return PatchBatch(values, centers, pad_flag, lab)


def mask_centers(m: Volume) -> np.ndarray:
    """Positive voxel coordinates in x-fastest order."""
    flat = np.flatnonzero(m.data.ravel(order="F"))
    return np.stack(np.unravel_index(flat, m.dims, order="F"), axis=1).astype(np.int64)


def balance_indices(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels != 0)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0:
        raise LesionBenchError("no-positive-samples", "no positive (lesion) samples to balance against")
    if len(neg) > len(pos):
        neg = np.sort(rng.choice(neg, size=len(pos), replace=False))
    return np.sort(np.concatenate([pos, neg]))


def balance_classes(patches: PatchBatch, seed: int) -> PatchBatch:
    """Undersample negatives without replacement to the number of positives."""
    if patches.labels is None:
        raise LesionBenchError("no-positive-samples", "patches are unlabeled")
    rng = np.random.Generator(np.random.PCG64(seed))
    return patches.subset(balance_indices(patches.labels, rng))


def inject_prior(channels: Channels, prior: Volume) -> dict[str, Volume]:
    """Append a prior lesion map as an extra ``PRIOR`` channel."""
    chans = dict(channels)
    first = next(iter(chans.values()))
    check_same_grid(first, prior)
    chans[PRIOR] = prior
    return chans


# ---------------------------------------------------------------------------
# Cascade
# ---------------------------------------------------------------------------


@dataclass
class CascadeCase:
    channels: dict[str, Volume]
    gt: Volume | None = None


@dataclass
class CascadeModel:
    stage1: object
    stage2: object
    reference: dict[str, np.ndarray] = field(repr=False)  # channel -> foreground quantiles
    candidate_threshold: float
    stage1_threshold: float
    binarization_threshold: float
    patch_spec: PatchSpec
    seed: int
    classifier: str = "knn"
    min_mm3: float = 0.0
    connectivity: int = 26


@dataclass
class CascadeOutput:
    probability: Volume
    mask: Volume
    candidates: Volume
    stage1_probability: Volume
    stage1_mask: Volume


def _stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stage])))


def _check_channels(channels: Channels, spec: PatchSpec) -> None:
    names = tuple(channels.keys())
    if names != spec.channels:
        raise LesionBenchError("channel-mismatch", f"expected channels {list(spec.channels)}, got {list(names)}")


def normalize_channels(channels: Channels, reference: Mapping[str, np.ndarray]) -> dict[str, Volume]:
    """Histogram-match intensity channels; the prior channel passes through."""
    return {name: (v if name == PRIOR else match_to_quantiles(v, reference[name])) for name, v in channels.items()}


def predict_centers(clf, channels: Channels, spec: PatchSpec, centers: np.ndarray, jobs: int = 1) -> np.ndarray:
    """Classifier probabilities at ``centers``, evaluated chunk by chunk."""
    chunks = [centers[i : i + PREDICT_CHUNK] for i in range(0, len(centers), PREDICT_CHUNK)]

    def run(chunk):
        return np.asarray(clf.predict_proba(extract_patches(channels, spec, chunk)), dtype=np.float64)

    if not chunks:
        return np.zeros(0, dtype=np.float64)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.clip(np.concatenate(parts), 0.0, 1.0)


def _volume_at(centers: np.ndarray, values: np.ndarray, like: Volume, kind: str) -> Volume:
    out = np.zeros(like.dims, dtype=np.float32 if kind == "prob" else np.uint8)
    if len(centers):
        out[tuple(centers.T)] = values
    return Volume(out, like.spacing, kind)


def run_cascade(model: CascadeModel, channels: Channels, jobs: int = 1) -> CascadeOutput:
    """Apply both stages and keep every intermediate product."""
    _check_channels(channels, model.patch_spec)
    norm = normalize_channels(channels, model.reference)
    flair = norm[model.patch_spec.channels[0]]
    candidates = select_candidates(flair, model.candidate_threshold)
    cand_xyz = mask_centers(candidates)
    p1 = predict_centers(model.stage1, norm, model.patch_spec, cand_xyz, jobs)
    s1_xyz = cand_xyz[p1 > model.stage1_threshold]
    p2 = predict_centers(model.stage2, norm, model.patch_spec, s1_xyz, jobs)
    probability = _volume_at(s1_xyz, p2, flair, "prob")
    binary = binarize(probability, model.binarization_threshold)
    mask = to_mask(filter_min_size(label_components(binary, model.connectivity), model.min_mm3))
    return CascadeOutput(
        probability=probability,
        mask=mask,
        candidates=candidates,
        stage1_probability=_volume_at(cand_xyz, p1, flair, "prob"),
        stage1_mask=_volume_at(s1_xyz, 1, flair, "mask"),
    )


def apply_cascade(model: CascadeModel, channels: Channels, jobs: int = 1) -> tuple[Volume, Volume]:
    """Stage-2 probability map (zero outside stage-1 positives) and the final mask."""
    out = run_cascade(model, channels, jobs)
    return out.probability, out.mask


def _balanced_training_set(norm_cases, spec, centers_per_case, rng) -> PatchBatch:
    labels = np.concatenate([c.gt.data[tuple(xyz.T)] for c, xyz in zip(norm_cases, centers_per_case)])
    case_of = np.concatenate([np.full(len(xyz), i) for i, xyz in enumerate(centers_per_case)])
    offsets = np.concatenate([np.arange(len(xyz)) for xyz in centers_per_case])
    keep = balance_indices(labels, rng)
    parts = []
    for i, case in enumerate(norm_cases):
        sel = offsets[keep[case_of[keep] == i]]
        if len(sel):
            parts.append(extract_patches(case.channels, spec, centers_per_case[i][sel], case.gt))
    return PatchBatch(
        np.concatenate([p.values for p in parts]),
        np.concatenate([p.centers for p in parts]),
        np.concatenate([p.padded for p in parts]),
        np.concatenate([p.labels for p in parts]),
    )


def train_cascade(
    train_cases: Sequence[CascadeCase],
    val_cases: Sequence[CascadeCase] = (),
    classifier_factory: Callable[[], object] | None = None,
    spec: PatchSpec = PatchSpec(),
    seed: int = 0,
    *,
    candidate_threshold: float | None = None,
    stage1_threshold: float = 0.5,
    grid: Sequence[float] = DEFAULT_GRID,
    min_mm3: float = 0.0,
    connectivity: int = 26,
    min_recall: float = 0.95,
    jobs: int = 1,
) -> CascadeModel:
    """Train the two-stage cascade.

    The first training case supplies the histogram-matching reference.  When
    ``candidate_threshold`` is None the largest fraction retaining
    ``min_recall`` of lesion voxels on the validation cases (training cases
    if none) is used.  The binarization threshold is optimized on the same
    cases from the stage-2 output.

    If every stage-1 positive on the training data is a true lesion voxel,
    stage 2 has no negatives to learn from; it is then trained on the
    stage-1 candidate pool under an independent sample instead.
    """
    if not train_cases:
        raise LesionBenchError("insufficient-data", "at least one training case is required")
    factory = classifier_factory or CLASSIFIERS["knn"]
    for case in list(train_cases) + list(val_cases):
        _check_channels(case.channels, spec)
        if case.gt is None:
            raise LesionBenchError("insufficient-data", "training and validation cases need ground truth")
    intensity = [c for c in spec.channels if c != PRIOR]
    reference = {name: foreground_quantiles(train_cases[0].channels[name]) for name in intensity}
    norm_train = [CascadeCase(normalize_channels(c.channels, reference), c.gt) for c in train_cases]
    norm_val = [CascadeCase(normalize_channels(c.channels, reference), c.gt) for c in val_cases] or norm_train
    flair = spec.channels[0]

    if candidate_threshold is None:
        candidate_threshold = choose_candidate_fraction(
            [c.channels[flair] for c in norm_val], [c.gt for c in norm_val], min_recall=min_recall
        )
    cand_xyz = [mask_centers(select_candidates(c.channels[flair], candidate_threshold)) for c in norm_train]

    stage1 = factory()
    stage1.fit(_balanced_training_set(norm_train, spec, cand_xyz, _stage_rng(seed, 1)), seed)

    s1_xyz = []
    for case, xyz in zip(norm_train, cand_xyz):
        p1 = predict_centers(stage1, case.channels, spec, xyz, jobs)
        s1_xyz.append(xyz[p1 > stage1_threshold])
    if sum(len(x) for x in s1_xyz) == 0:
        raise LesionBenchError("stage1-degenerate", "stage 1 marks no training voxel as lesion")
    s1_labels = np.concatenate([c.gt.data[tuple(x.T)] for c, x in zip(norm_train, s1_xyz)])
    stage2_pool = s1_xyz if 0 < s1_labels.sum() < len(s1_labels) else cand_xyz

    stage2 = factory()
    stage2.fit(_balanced_training_set(norm_train, spec, stage2_pool, _stage_rng(seed, 2)), seed)

    model = CascadeModel(
        stage1=stage1,
        stage2=stage2,
        reference=reference,
        candidate_threshold=float(candidate_threshold),
        stage1_threshold=float(stage1_threshold),
        binarization_threshold=0.5,
        patch_spec=spec,
        seed=seed,
        classifier=getattr(stage1, "name", type(stage1).__name__),
        min_mm3=float(min_mm3),
        connectivity=connectivity,
    )
    eval_cases = list(val_cases) or list(train_cases)
    scored = [(run_cascade(model, c.channels, jobs).probability, c.gt) for c in eval_cases]
    model.binarization_threshold = optimize_threshold(scored, grid, min_mm3, connectivity, jobs)
    return model


# ---------------------------------------------------------------------------
# Archive
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.array(arr, order="C", copy=True), allow_pickle=False)
    return buf.getvalue()


def _zip_add(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def model_manifest(model: CascadeModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "tool_version": __version__,
        "classifier": model.classifier,
        "patch_spec": {"edge": model.patch_spec.edge, "channels": list(model.patch_spec.channels)},
        "candidate_threshold": model.candidate_threshold,
        "stage1_threshold": model.stage1_threshold,
        "binarization_threshold": model.binarization_threshold,
        "min_mm3": model.min_mm3,
        "connectivity": model.connectivity,
        "seed": model.seed,
        "reference_channels": list(model.reference),
    }


def model_bytes(model: CascadeModel, provenance: dict | None = None) -> bytes:
    """Serialize to a deterministic zip: manifest.json, optional provenance.json, .npy payloads."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_add(zf, "manifest.json", json.dumps(model_manifest(model), indent=2, sort_keys=True).encode())
        if provenance is not None:
            _zip_add(zf, "provenance.json", json.dumps(provenance, indent=2, sort_keys=True).encode())
        for name, q in model.reference.items():
            _zip_add(zf, f"reference/{name}.npy", _npy_bytes(q))
        for stage in ("stage1", "stage2"):
            for key, arr in sorted(getattr(model, stage).to_payload().items()):
                _zip_add(zf, f"{stage}/{key}.npy", _npy_bytes(np.asarray(arr)))
    return buf.getvalue()


def save_model(model: CascadeModel, path, provenance: dict | None = None) -> str:
    """Write the archive atomically; returns its SHA-256."""
    payload = model_bytes(model, provenance)
    atomic_write(path, payload)
    return hashlib.sha256(payload).hexdigest()


def load_model(path) -> CascadeModel:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise LesionBenchError("io-error", f"cannot open model archive {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise LesionBenchError("corrupt-file", "model archive lacks manifest.json") from exc
        if manifest.get("format_version") != MODEL_FORMAT_VERSION:
            raise LesionBenchError("unsupported-format", f"model format version {manifest.get('format_version')}")
        cls = CLASSIFIERS.get(manifest["classifier"])
        if cls is None:
            raise LesionBenchError("unsupported-format", f"unknown classifier {manifest['classifier']!r}")

        def arrays(prefix):
            return {
                n[len(prefix) + 1 : -4]: np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                for n in zf.namelist()
                if n.startswith(prefix + "/")
            }

        reference = arrays("reference")
        reference = {name: reference[name] for name in manifest["reference_channels"]}
        return CascadeModel(
            stage1=cls.from_payload(arrays("stage1")),
            stage2=cls.from_payload(arrays("stage2")),
            reference=reference,
            candidate_threshold=manifest["candidate_threshold"],
            stage1_threshold=manifest["stage1_threshold"],
            binarization_threshold=manifest["binarization_threshold"],
            patch_spec=PatchSpec(manifest["patch_spec"]["edge"], tuple(manifest["patch_spec"]["channels"])),
            seed=manifest["seed"],
            classifier=manifest["classifier"],
            min_mm3=manifest["min_mm3"],
            connectivity=manifest["connectivity"],
        )
