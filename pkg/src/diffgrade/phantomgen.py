"""Analytic diffusion phantoms and labeled toy cohorts.

Every generator is deterministic per seed, so phantoms double as ground-truth
oracles for the fitting and end-to-end pipeline tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cdis_synth import DwiStack, SignalModelParams
from .ingest import CategorizedGrade, Modality, Volume3D

TOY_BACKGROUND_MEAN = 100.0
TOY_NOISE_SIGMA = 10.0


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box (numpy half-open index ranges) with its signal parameters."""

    x: tuple[int, int]
    y: tuple[int, int]
    z: tuple[int, int]
    s0: float
    adc: float


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int]
    regions: list[BoxRegion] = field(default_factory=list)
    background: tuple[float, float] = (0.0, 0.0)  # (s0, adc)
    noise_sigma: float = 0.0  # fraction of local S0
    seed: int = 0

    def validate(self) -> "PhantomSpec":
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.background[0] < 0 or self.background[1] < 0:
            raise ValueError("background s0/adc must be >= 0")
        for region in self.regions:
            for (lo, hi), dim in zip((region.x, region.y, region.z), self.dims):
                if not (0 <= lo < hi <= dim):
                    raise ValueError(f"region box {region} exceeds dims {self.dims}")
            if region.s0 < 0 or region.adc < 0:
                raise ValueError("region s0/adc must be >= 0")
        return self


def paint_parameter_maps(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Background fill, then each region in order (later boxes overwrite earlier)."""
    s0 = np.full(spec.dims, spec.background[0], dtype=np.float64)
    adc = np.full(spec.dims, spec.background[1], dtype=np.float64)
    for region in spec.regions:
        sl = (slice(*region.x), slice(*region.y), slice(*region.z))
        s0[sl] = region.s0
        adc[sl] = region.adc
    return s0, adc


def make_dwi_phantom(
    spec: PhantomSpec, b_values: list[float] | tuple[float, ...]
) -> tuple[DwiStack, SignalModelParams]:
    """Monoexponential signals from the painted maps plus optional Gaussian noise.

    Noise is zero-mean with sigma = noise_sigma * local S0, clamped at zero so
    the stack invariant (signals >= 0) holds. Returns the ground-truth maps.
    """
    spec.validate()
    if len(b_values) < 2:
        raise ValueError(f"need >= 2 b-values, got {len(b_values)}")
    s0, adc = paint_parameter_maps(spec)
    rng = np.random.default_rng(spec.seed)
    volumes = []
    for b in b_values:
        clean = s0 * np.exp(-float(b) * adc)
        if spec.noise_sigma > 0:
            noisy = clean + rng.normal(0.0, 1.0, size=spec.dims) * (spec.noise_sigma * s0)
            clean = np.maximum(noisy, 0.0)
        volumes.append(Volume3D(clean, metadata={"b_value": float(b)}))
    stack = DwiStack(b_values=tuple(float(b) for b in b_values), volumes=volumes).validate()
    truth = SignalModelParams(
        s0_map=Volume3D(s0, metadata={"quantity": "s0"}),
        adc_map=Volume3D(adc, metadata={"quantity": "adc_mm2_per_s"}),
    )
    return stack, truth


@dataclass
class ToyCohortSpec:
    n_per_class: int
    cube_dims: tuple[int, int, int] = (32, 32, 16)
    effect_size: float = 10.0  # class-mean separation in units of voxel noise sigma
    seed: int = 0

    def validate(self) -> "ToyCohortSpec":
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if any(d < 1 for d in self.cube_dims):
            raise ValueError(f"cube_dims must be positive, got {self.cube_dims}")
        if self.effect_size < 0:
            raise ValueError("effect_size must be >= 0")
        return self


def centered_sphere_mask(dims: tuple[int, int, int], radius: float | None = None) -> np.ndarray:
    if radius is None:
        radius = min(dims) / 4.0
    centers = [(d - 1) / 2.0 for d in dims]
    grids = np.ogrid[0 : dims[0], 0 : dims[1], 0 : dims[2]]
    dist2 = sum((g - c) ** 2 for g, c in zip(grids, centers))
    return dist2 <= radius**2


def make_toy_cohort(
    spec: ToyCohortSpec,
    out_dir: str | Path,
    modality: Modality = Modality.T2W,
) -> tuple[list[Volume3D], list[CategorizedGrade], Path]:
    """Two-class cohort: High cubes carry a centered bright sphere
    (mean shifted by effect_size * sigma), LowIntermediate cubes noise only.

    Writes one raw volume per patient plus a JSON-lines manifest and returns
    (volumes, labels, manifest_path).
    """
    from .ingest import save_volume_raw  # local import to keep module load light

    spec.validate()
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    sphere = centered_sphere_mask(spec.cube_dims)
    volumes: list[Volume3D] = []
    labels: list[CategorizedGrade] = []
    lines = []
    total = 2 * spec.n_per_class
    for i in range(total):
        label = CategorizedGrade.HIGH if i % 2 == 0 else CategorizedGrade.LOW_INTERMEDIATE
        data = rng.normal(TOY_BACKGROUND_MEAN, TOY_NOISE_SIGMA, size=spec.cube_dims)
        if label is CategorizedGrade.HIGH:
            data[sphere] += spec.effect_size * TOY_NOISE_SIGMA
        volume = Volume3D(data)
        patient_id = f"TOY{i:04d}"
        path = vol_dir / f"{patient_id}.vol"
        save_volume_raw(path, volume)
        volumes.append(volume)
        labels.append(label)
        lines.append(
            {
                "patient_id": patient_id,
                "institution": "phantom",
                "grade": "III" if label is CategorizedGrade.HIGH else "II",
                "paths": {modality.value: str(path)},
            }
        )

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True))
            fh.write("\n")
    return volumes, labels, manifest_path


def write_dwi_cohort(
    specs: list[PhantomSpec],
    b_values: list[float] | tuple[float, ...],
    out_dir: str | Path,
    grades: list[str] | None = None,
) -> Path:
    """Write a DWI-stack manifest for several phantoms (one patient each)."""
    from .ingest import save_volume_raw

    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, spec in enumerate(specs):
        stack, _ = make_dwi_phantom(spec, b_values)
        patient_id = f"PHA{i:04d}"
        dwi_paths = []
        for b, vol in zip(stack.b_values, stack.volumes):
            path = vol_dir / f"{patient_id}_b{int(b)}.vol"
            save_volume_raw(path, vol)
            dwi_paths.append(str(path))
        lines.append(
            {
                "patient_id": patient_id,
                "institution": "phantom",
                "grade": grades[i] if grades else "II",
                "paths": {"dwi": dwi_paths},
                "b_values": [float(b) for b in stack.b_values],
            }
        )
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True))
            fh.write("\n")
    return manifest_path
