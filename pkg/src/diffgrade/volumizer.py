"""Standardization of arbitrary volumes into normalized data cubes.

Fixed stage order: in-plane resample -> depth crop/pad -> min-max normalize,
so the normalization statistics reflect the final grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import Volume3D, load_volume_raw, save_volume_raw

STANDARD_WIDTH = 224
STANDARD_HEIGHT = 224
STANDARD_DEPTH = 25


@dataclass
class StandardCube:
    """A normalized scalar cube (default 224x224x25, values in [0,1])."""

    data: np.ndarray
    source_id: str
    normalization: str = "MinMax"

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def validate(self, strict_shape: bool = True) -> "StandardCube":
        if strict_shape and self.data.shape != (STANDARD_WIDTH, STANDARD_HEIGHT, STANDARD_DEPTH):
            raise ValueError(f"expected standard cube shape, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("cube values must lie in [0, 1]")
        return self


def _corner_aligned_positions(n_in: int, n_out: int) -> np.ndarray:
    # Corner alignment: first/last output samples coincide with first/last input samples.
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.linspace(0.0, n_in - 1, n_out)


def resample_inplane(
    volume: Volume3D, target_w: int = STANDARD_WIDTH, target_h: int = STANDARD_HEIGHT
) -> Volume3D:
    """Bilinear, corner-aligned resampling of each axial slice; depth untouched."""
    data = volume.data.astype(np.float64)
    w, h, d = data.shape

    x = _corner_aligned_positions(w, target_w)
    y = _corner_aligned_positions(h, target_h)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None, None]
    fy = (y - y0)[None, :, None]

    vx0 = data[x0]
    vx1 = data[x1]
    v00 = vx0[:, y0, :]
    v01 = vx0[:, y1, :]
    v10 = vx1[:, y0, :]
    v11 = vx1[:, y1, :]
    out = (1.0 - fx) * ((1.0 - fy) * v00 + fy * v01) + fx * ((1.0 - fy) * v10 + fy * v11)

    sx, sy, sz = volume.voxel_spacing
    new_sx = sx * (w - 1) / (target_w - 1) if target_w > 1 and w > 1 else sx
    new_sy = sy * (h - 1) / (target_h - 1) if target_h > 1 and h > 1 else sy
    return Volume3D(out, (new_sx, new_sy, sz), dict(volume.metadata))


def standardize_depth(volume: Volume3D, target_d: int = STANDARD_DEPTH) -> Volume3D:
    """Symmetric center crop (extra slice dropped from the end) or symmetric
    zero pad (extra slice appended at the end) to the target depth."""
    data = volume.data
    d = data.shape[2]
    if d == target_d:
        out = data
    elif d > target_d:
        excess = d - target_d
        front = excess // 2
        out = data[:, :, front : front + target_d]
    else:
        deficit = target_d - d
        front = deficit // 2
        back = deficit - front
        out = np.concatenate(
            [
                np.zeros(data.shape[:2] + (front,), dtype=data.dtype),
                data,
                np.zeros(data.shape[:2] + (back,), dtype=data.dtype),
            ],
            axis=2,
        )
    return Volume3D(out, volume.voxel_spacing, dict(volume.metadata))


def normalize_intensity(volume: Volume3D) -> Volume3D:
    data = minmax_normalize(volume.data.astype(np.float64))
    return Volume3D(data, volume.voxel_spacing, dict(volume.metadata))


def minmax_normalize(data: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min); a constant array maps to all zeros."""
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        return np.zeros_like(data, dtype=np.float64)
    return (data.astype(np.float64) - lo) / (hi - lo)


def standardize(
    volume: Volume3D,
    source_id: str,
    target_w: int = STANDARD_WIDTH,
    target_h: int = STANDARD_HEIGHT,
    target_d: int = STANDARD_DEPTH,
) -> StandardCube:
    """resample -> depth -> normalize, wrapped with provenance."""
    resampled = resample_inplane(volume, target_w, target_h)
    depth_fixed = standardize_depth(resampled, target_d)
    normalized = normalize_intensity(depth_fixed)
    return StandardCube(data=normalized.data, source_id=source_id, normalization="MinMax")


def save_cube(path: str | Path, cube: StandardCube) -> None:
    """Persist as a raw tensor file plus a JSON sidecar ({source_id, normalization})."""
    path = Path(path)
    save_volume_raw(path, Volume3D(cube.data))
    sidecar = {"source_id": cube.source_id, "normalization": cube.normalization}
    with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def load_cube(path: str | Path) -> StandardCube:
    path = Path(path)
    volume = load_volume_raw(path)
    with open(path.with_suffix(path.suffix + ".json"), "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    return StandardCube(
        data=volume.data,
        source_id=sidecar["source_id"],
        normalization=sidecar.get("normalization", "MinMax"),
    )
