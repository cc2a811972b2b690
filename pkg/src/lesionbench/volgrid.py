"""3D volume data model and file I/O.

A :class:`Volume` holds a scalar grid indexed ``data[x, y, z]`` together with
the physical voxel spacing in mm.  The flat on-disk order is x-fastest, which
is numpy Fortran order for this indexing.

Two on-disk formats are supported:

* NIfTI-1 single file (``.nii``), uncompressed, datatypes uint8/int16/float32,
  spacing only (no affine reorientation).
* A portable raw format: an 8-byte magic, a little-endian uint32 header
  length, a JSON header ``{dims, spacing, dtype, kind}`` and the
  little-endian x-fastest payload.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lesionbench.errors import LesionBenchError

DTYPES = {"uint8": np.uint8, "int16": np.int16, "float32": np.float32}
KINDS = ("image", "mask", "prob")

NIFTI_DATATYPE = {2: "uint8", 4: "int16", 16: "float32"}
NIFTI_CODE = {v: k for k, v in NIFTI_DATATYPE.items()}
NIFTI_BITPIX = {"uint8": 8, "int16": 16, "float32": 32}
NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352

RAW_MAGIC = b"LBRAW1\n\0"


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D scalar grid with per-axis spacing in mm.

    ``kind`` tags the value domain: ``"image"`` (any finite value),
    ``"mask"`` (exactly 0 or 1) or ``"prob"`` (within [0, 1]).
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    kind: str = "image"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise LesionBenchError("invalid-volume", f"expected a non-empty 3D array, got shape {data.shape}")
        if data.dtype.name not in DTYPES:
            raise LesionBenchError("unsupported-dtype", data.dtype.name)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise LesionBenchError("invalid-header", f"spacing must be three positive finite values, got {self.spacing}")
        if self.kind not in KINDS:
            raise LesionBenchError("invalid-volume", f"unknown kind {self.kind!r}")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        self.validate()

    def validate(self) -> None:
        """Check the value-domain invariant of ``kind``."""
        d = self.data
        if d.dtype == np.float32 and not np.all(np.isfinite(d)):
            raise LesionBenchError("invariant-violation", "non-finite voxel values")
        if self.kind == "mask" and not np.all((d == 0) | (d == 1)):
            raise LesionBenchError("invariant-violation", "mask values must be 0 or 1")
        if self.kind == "prob" and not np.all((d >= 0) & (d <= 1)):
            raise LesionBenchError("invariant-violation", "probabilities must lie in [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def dtype(self) -> str:
        return self.data.dtype.name

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def flat(self) -> np.ndarray:
        """Voxel values in x-fastest order."""
        return self.data.ravel(order="F")

    def same_grid(self, other: "Volume") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing


def binary_mask(data, spacing) -> Volume:
    """Build a mask volume from any array whose nonzero voxels are lesion."""
    return Volume((np.asarray(data) != 0).astype(np.uint8), spacing, "mask")


def probability_map(data, spacing) -> Volume:
    return Volume(np.asarray(data, dtype=np.float32), spacing, "prob")


def as_probability(v: Volume) -> Volume:
    """View a mask or probability volume as a probability map."""
    if v.kind == "prob":
        return v
    return probability_map(v.data, v.spacing)


def check_same_grid(a: Volume, b: Volume, code: str = "grid-mismatch") -> None:
    if not a.same_grid(b):
        raise LesionBenchError(code, f"{a.dims}@{a.spacing} vs {b.dims}@{b.spacing}")


def binarize(p: Volume, t: float) -> Volume:
    """Threshold a probability map; a voxel is positive iff ``p > t``."""
    if not (0.0 <= t <= 1.0):
        raise LesionBenchError("invalid-threshold", f"threshold {t} outside [0, 1]")
    if p.kind == "image":
        p = probability_map(p.data, p.spacing)
    return Volume((p.data > t).astype(np.uint8), p.spacing, "mask")


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _float32_exact(x: float) -> float:
    # shortest decimal that round-trips through float32, so 1.2 stays 1.2
    return float(str(np.float32(x)))


def atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except OSError as exc:
        raise LesionBenchError("io-error", f"cannot write {path}: {exc}") from exc


def _nifti_bytes(v: Volume) -> bytes:
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *v.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, NIFTI_CODE[v.dtype], NIFTI_BITPIX[v.dtype])
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    descrip = f"lesionbench kind={v.kind}".encode("ascii")
    hdr[148 : 148 + len(descrip)] = descrip
    hdr[344:348] = b"n+1\0"
    payload = v.data.astype(v.data.dtype.newbyteorder("<")).tobytes(order="F")
    return bytes(hdr) + b"\0\0\0\0" + payload


def _raw_bytes(v: Volume) -> bytes:
    header = json.dumps(
        {"dims": list(v.dims), "spacing": list(v.spacing), "dtype": v.dtype, "kind": v.kind},
        sort_keys=True,
    ).encode("utf-8")
    payload = v.data.astype(v.data.dtype.newbyteorder("<")).tobytes(order="F")
    return RAW_MAGIC + struct.pack("<I", len(header)) + header + payload


def write_volume(v: Volume, path, format: str | None = None) -> None:
    """Write ``v`` to ``path`` atomically.

    ``format`` is ``"nifti"`` or ``"raw"``; when omitted it is inferred from the
    suffix (``.nii`` means NIfTI, anything else raw).
    """
    v.validate()
    path = Path(path)
    if format is None:
        format = "nifti" if path.suffix == ".nii" else "raw"
    if format == "nifti":
        payload = _nifti_bytes(v)
    elif format == "raw":
        payload = _raw_bytes(v)
    else:
        raise LesionBenchError("invalid-format", f"unknown volume format {format!r}")
    atomic_write(path, payload)


def _payload(buf: bytes, offset: int, dims, dtype: str, endian: str) -> np.ndarray:
    dt = np.dtype(DTYPES[dtype]).newbyteorder(endian)
    n = int(np.prod(dims))
    if offset < 0 or len(buf) < offset + n * dt.itemsize:
        raise LesionBenchError("corrupt-file", f"payload truncated: need {n * dt.itemsize} bytes after offset {offset}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=offset)
    return arr.astype(dt.newbyteorder("=")).reshape(dims, order="F")


def _read_nifti(buf: bytes, endian: str) -> Volume:
    ndim, *dim = struct.unpack_from(endian + "8h", buf, 40)
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[3:ndim]):
        raise LesionBenchError("invalid-header", f"only 3D volumes are supported (dim={[ndim, *dim]})")
    dims = tuple(dim[:3])
    if min(dims) < 1:
        raise LesionBenchError("invalid-header", f"non-positive dimensions {dims}")
    datatype = struct.unpack_from(endian + "h", buf, 70)[0]
    if datatype not in NIFTI_DATATYPE:
        raise LesionBenchError("unsupported-dtype", f"NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from(endian + "8f", buf, 76)
    spacing = tuple(_float32_exact(p) for p in pixdim[1:4])
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise LesionBenchError("invalid-header", f"non-positive spacing {spacing}")
    vox_offset = int(struct.unpack_from(endian + "f", buf, 108)[0])
    descrip = buf[148:228].split(b"\0", 1)[0].decode("ascii", "replace")
    kind = "image"
    if descrip.startswith("lesionbench kind="):
        kind = descrip.split("=", 1)[1] if descrip.split("=", 1)[1] in KINDS else "image"
    data = _payload(buf, max(vox_offset, NIFTI_HEADER_SIZE), dims, NIFTI_DATATYPE[datatype], endian)
    return Volume(data, spacing, kind)


def _read_raw(buf: bytes) -> Volume:
    start = len(RAW_MAGIC) + 4
    if len(buf) < start:
        raise LesionBenchError("corrupt-file", "raw header truncated")
    (hlen,) = struct.unpack_from("<I", buf, len(RAW_MAGIC))
    try:
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
        dims = tuple(int(n) for n in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        dtype = header["dtype"]
        kind = header.get("kind", "image")
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise LesionBenchError("corrupt-file", f"unreadable raw header: {exc}") from exc
    if dtype not in DTYPES:
        raise LesionBenchError("unsupported-dtype", str(dtype))
    if len(dims) != 3 or min(dims) < 1:
        raise LesionBenchError("invalid-header", f"bad dims {dims}")
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise LesionBenchError("invalid-header", f"non-positive spacing {spacing}")
    return Volume(_payload(buf, start + hlen, dims, dtype, "<"), spacing, kind)


def read_volume(path) -> Volume:
    """Read a NIfTI-1 or raw-format volume; the format is sniffed from the bytes."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise LesionBenchError("io-error", f"cannot read {path}: {exc}") from exc
    if buf.startswith(RAW_MAGIC):
        return _read_raw(buf)
    if len(buf) >= NIFTI_HEADER_SIZE:
        for endian in "<>":
            if struct.unpack_from(endian + "i", buf, 0)[0] == NIFTI_HEADER_SIZE:
                if buf[344:348] != b"n+1\0":
                    raise LesionBenchError("unsupported-format", "only single-file NIfTI-1 (n+1) is supported")
                return _read_nifti(buf, endian)
    raise LesionBenchError("corrupt-file", f"{path} is neither NIfTI-1 nor a raw volume")
