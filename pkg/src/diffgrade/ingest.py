"""Patient manifests, grade categorization, and volume I/O.

Manifests are JSON lines, one patient per line. Volumes are NIfTI-1
(.nii/.nii.gz) for clinical data or the raw VOL1 tensor format used by
tests and phantom output.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np


class ManifestError(ValueError):
    """Malformed manifest content; message carries the offending line number."""


class VolumeFormatError(ValueError):
    """Unreadable, unsupported, or non-finite volume file."""


class SbrGrade(Enum):
    GRADE_I = "I"
    GRADE_II = "II"
    GRADE_III = "III"


class CategorizedGrade(Enum):
    LOW_INTERMEDIATE = "LowIntermediate"
    HIGH = "High"


class Modality(Enum):
    CDIS = "cdis"
    DWI = "dwi"
    T2W = "t2w"
    ADC = "adc"


def categorize_grade(grade: SbrGrade) -> CategorizedGrade:
    """Collapse the three histological grades to the binary target."""
    if grade is SbrGrade.GRADE_III:
        return CategorizedGrade.HIGH
    return CategorizedGrade.LOW_INTERMEDIATE


@dataclass
class Volume3D:
    """A scalar grid of shape (width, height, depth) with voxel spacing in mm."""

    data: np.ndarray
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    metadata: dict = field(default_factory=dict)

    def validate(self) -> "Volume3D":
        if self.data.ndim != 3:
            raise VolumeFormatError(f"expected a 3D grid, got ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise VolumeFormatError(f"all dimensions must be >= 1, got {self.data.shape}")
        if any(s <= 0 for s in self.voxel_spacing):
            raise VolumeFormatError(f"voxel spacing must be positive, got {self.voxel_spacing}")
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise VolumeFormatError(f"volume contains {bad} non-finite voxel(s)")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class PatientRecord:
    """One manifest line: identifiers, grade, and per-modality file paths.

    `paths` maps each present modality to an ordered tuple of file paths;
    only DWI may hold more than one (one per b-value, ascending).
    """

    patient_id: str
    institution: str
    grade: SbrGrade
    paths: Mapping[Modality, tuple[str, ...]]
    b_values: tuple[float, ...] | None = None

    def has(self, modality: Modality) -> bool:
        return modality in self.paths

    def single_path(self, modality: Modality) -> str:
        entries = self.paths[modality]
        if len(entries) != 1:
            raise ValueError(f"{modality.value} has {len(entries)} paths, expected 1")
        return entries[0]

    @property
    def dwi_paths(self) -> tuple[str, ...]:
        return self.paths[Modality.DWI]


_GRADE_TOKENS = {g.value: g for g in SbrGrade}


def _parse_line(obj: dict, lineno: int) -> PatientRecord:
    pid = obj.get("patient_id")
    if not isinstance(pid, str) or not pid:
        raise ManifestError(f"line {lineno}: missing or empty patient_id")
    grade_token = obj.get("grade")
    if grade_token not in _GRADE_TOKENS:
        raise ManifestError(f"line {lineno}: invalid grade token {grade_token!r} (expected I/II/III)")
    raw_paths = obj.get("paths")
    if not isinstance(raw_paths, dict) or not raw_paths:
        raise ManifestError(f"line {lineno}: at least one modality path is required")

    paths: dict[Modality, tuple[str, ...]] = {}
    for key, value in raw_paths.items():
        try:
            modality = Modality(key)
        except ValueError:
            raise ManifestError(f"line {lineno}: unknown modality key {key!r}") from None
        if modality is Modality.DWI:
            if not isinstance(value, list) or not all(isinstance(p, str) for p in value):
                raise ManifestError(f"line {lineno}: dwi paths must be a list of strings")
            paths[modality] = tuple(value)
        else:
            if not isinstance(value, str):
                raise ManifestError(f"line {lineno}: {key} path must be a string")
            paths[modality] = (value,)

    b_values = obj.get("b_values")
    if Modality.DWI in paths:
        if not isinstance(b_values, list) or len(b_values) < 2:
            raise ManifestError(f"line {lineno}: b_values must list >= 2 values when dwi is present")
        bvals = tuple(float(b) for b in b_values)
        if any(b < 0 for b in bvals):
            raise ManifestError(f"line {lineno}: b_values must be non-negative")
        if any(b1 <= b0 for b0, b1 in zip(bvals, bvals[1:])):
            raise ManifestError(f"line {lineno}: b_values must be strictly increasing, got {list(bvals)}")
        if len(bvals) != len(paths[Modality.DWI]):
            raise ManifestError(
                f"line {lineno}: {len(paths[Modality.DWI])} dwi paths but {len(bvals)} b_values"
            )
    else:
        if b_values is not None:
            raise ManifestError(f"line {lineno}: b_values given without dwi paths")
        bvals = None

    return PatientRecord(
        patient_id=pid,
        institution=str(obj.get("institution", "")),
        grade=_GRADE_TOKENS[grade_token],
        paths=paths,
        b_values=bvals,
    )


def load_manifest(path: str | Path) -> list[PatientRecord]:
    """Parse a JSON-lines manifest into validated patient records."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records: list[PatientRecord] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            record = _parse_line(obj, lineno)
            if record.patient_id in seen:
                raise ManifestError(
                    f"line {lineno}: duplicate patient_id {record.patient_id!r} "
                    f"(first seen on line {seen[record.patient_id]})"
                )
            seen[record.patient_id] = lineno
            records.append(record)
    return records


def cohort_summary(
    records: list[PatientRecord],
) -> tuple[dict[SbrGrade, int], dict[CategorizedGrade, int]]:
    """Per-grade and per-category patient counts (all keys present, zeros included)."""
    by_grade = {g: 0 for g in SbrGrade}
    by_category = {c: 0 for c in CategorizedGrade}
    for record in records:
        by_grade[record.grade] += 1
        by_category[categorize_grade(record.grade)] += 1
    return by_grade, by_category


# ---------------------------------------------------------------------------
# Raw VOL1 tensor format
#
# Little-endian: magic "VOL1" | dtype code u8 (0=float32, 1=float64) |
# dims 3x u32 (width, height, depth) | spacings 3x f32 (mm) | row-major payload.
# ---------------------------------------------------------------------------

_VOL1_MAGIC = b"VOL1"
_VOL1_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_volume_raw(path: str | Path, volume: Volume3D) -> None:
    data = volume.data
    if data.dtype == np.float64:
        code = 1
    else:
        code = 0
        data = data.astype(np.float32)
    header = _VOL1_MAGIC + struct.pack("<B3I3f", code, *data.shape, *volume.voxel_spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data, dtype=_VOL1_DTYPES[code]).tobytes())


def load_volume_raw(path: str | Path) -> Volume3D:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _VOL1_MAGIC:
        raise VolumeFormatError(f"{path}: not a VOL1 file (bad magic)")
    code, w, h, d, sx, sy, sz = struct.unpack_from("<B3I3f", blob, 4)
    if code not in _VOL1_DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    dtype = _VOL1_DTYPES[code]
    offset = 4 + struct.calcsize("<B3I3f")
    expected = w * h * d * dtype.itemsize
    if len(blob) - offset != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(blob) - offset} bytes, header declares {expected}"
        )
    data = np.frombuffer(blob, dtype=dtype, count=w * h * d, offset=offset).reshape(w, h, d)
    return Volume3D(
        data=data.copy(),
        voxel_spacing=(float(sx), float(sy), float(sz)),
        metadata={"format": "vol1", "path": str(path)},
    )


# ---------------------------------------------------------------------------
# Minimal NIfTI-1 codec (348-byte header, single-file n+1 magic).
# Implemented locally: nibabel is not available in the build environment.
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8", 256: "i1", 512: "u2"}


def _read_nifti_bytes(blob: bytes, path: str) -> Volume3D:
    if len(blob) < 352:
        raise VolumeFormatError(f"{path}: too short for a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    endian = "<"
    if sizeof_hdr != 348:
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != 348:
            raise VolumeFormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
        endian = ">"
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from(f"{endian}8h", blob, 40)
    (datatype,) = struct.unpack_from(f"{endian}h", blob, 70)
    pixdim = struct.unpack_from(f"{endian}8f", blob, 76)
    (vox_offset,) = struct.unpack_from(f"{endian}f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{endian}2f", blob, 112)

    ndim = dim[0]
    if ndim < 3 or any(dim[1 + k] > 1 for k in range(3, ndim)):
        raise VolumeFormatError(f"{path}: expected a 3D image, got dim={dim[: ndim + 1]}")
    shape = (dim[1], dim[2], dim[3])
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(endian + _NIFTI_DTYPES[datatype])

    count = shape[0] * shape[1] * shape[2]
    offset = int(vox_offset) if vox_offset else 352
    if len(blob) < offset + count * dtype.itemsize:
        raise VolumeFormatError(f"{path}: truncated NIfTI payload")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    # NIfTI stores the first index fastest (Fortran order).
    data = np.asarray(data).reshape(shape, order="F").astype(np.float32)
    if scl_slope not in (0.0,) and np.isfinite(scl_slope):
        data = data * scl_slope + (scl_inter if np.isfinite(scl_inter) else 0.0)
    spacing = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    return Volume3D(
        data=data,
        voxel_spacing=spacing,  # type: ignore[arg-type]
        metadata={"format": "nifti", "path": path},
    )


def save_volume_nifti(path: str | Path, volume: Volume3D) -> None:
    """Write a float32 single-file NIfTI-1 image (.nii, or .nii.gz by suffix)."""
    data = volume.data.astype(np.float32)
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, *volume.data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)  # float32
    struct.pack_into("<h", header, 72, 32)  # bitpix
    struct.pack_into("<8f", header, 76, 1.0, *volume.voxel_spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = b"n+1\x00"
    blob = bytes(header) + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def load_volume(path: str | Path) -> Volume3D:
    """Load a volume (NIfTI-1 or VOL1 by suffix); non-finite voxels are an error."""
    path = Path(path)
    if not path.exists():
        raise VolumeFormatError(f"volume not found: {path}")
    if _is_nifti(path):
        opener = gzip.open if path.name.lower().endswith(".gz") else open
        try:
            with opener(path, "rb") as fh:  # type: ignore[operator]
                blob = fh.read()
        except OSError as exc:
            raise VolumeFormatError(f"{path}: unreadable ({exc})") from None
        volume = _read_nifti_bytes(blob, str(path))
    elif path.suffix == ".vol":
        volume = load_volume_raw(path)
    else:
        raise VolumeFormatError(f"{path}: unsupported volume format (expected .nii/.nii.gz/.vol)")
    return volume.validate()


def save_volume(path: str | Path, volume: Volume3D) -> None:
    path = Path(path)
    if _is_nifti(path):
        save_volume_nifti(path, volume)
    elif path.suffix == ".vol":
        save_volume_raw(path, volume)
    else:
        raise VolumeFormatError(f"{path}: unsupported volume format (expected .nii/.nii.gz/.vol)")
