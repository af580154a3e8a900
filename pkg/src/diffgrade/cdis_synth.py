"""Correlated diffusion volume synthesis from multi-b-value DWI stacks.

The signal model is the monoexponential decay S(b) = S0 * exp(-b * ADC),
fit voxelwise by ordinary least squares in log space. Synthetic signals at
unacquired b-values are mixed with the native ones as a coefficient-weighted
geometric product of min-max-normalized volumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import Volume3D
from .volumizer import minmax_normalize

DEFAULT_SIGNAL_FLOOR = 1e-6
# Normalized signals are floored here before exponentiation by a negative
# coefficient, so 0^c stays finite.
NEGATIVE_EXPONENT_FLOOR = 1e-12

DEFAULT_SYNTHETIC_B_VALUES = (1500.0, 2000.0, 2500.0)


@dataclass
class DwiStack:
    """Aligned diffusion-weighted volumes indexed by strictly increasing b-values."""

    b_values: tuple[float, ...]
    volumes: list[Volume3D]

    def validate(self) -> "DwiStack":
        if len(self.b_values) < 2:
            raise ValueError(f"need >= 2 b-values, got {len(self.b_values)}")
        if len(self.b_values) != len(self.volumes):
            raise ValueError(
                f"{len(self.b_values)} b-values but {len(self.volumes)} volumes"
            )
        if any(b < 0 for b in self.b_values):
            raise ValueError("b-values must be non-negative")
        if any(b1 <= b0 for b0, b1 in zip(self.b_values, self.b_values[1:])):
            raise ValueError(f"b-values must be strictly increasing, got {self.b_values}")
        shape = self.volumes[0].data.shape
        spacing = self.volumes[0].voxel_spacing
        for vol in self.volumes[1:]:
            if vol.data.shape != shape:
                raise ValueError(f"volume shapes differ: {vol.data.shape} vs {shape}")
            if vol.voxel_spacing != spacing:
                raise ValueError("volume spacings differ across the stack")
        for vol in self.volumes:
            if vol.data.min() < 0:
                raise ValueError("signal values must be non-negative")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.volumes[0].data.shape)  # type: ignore[return-value]

    @property
    def voxel_spacing(self) -> tuple[float, float, float]:
        return self.volumes[0].voxel_spacing

    def as_array(self) -> np.ndarray:
        return np.stack([v.data.astype(np.float64) for v in self.volumes], axis=0)


@dataclass
class SignalModelParams:
    """Voxelwise monoexponential fit: signal at b=0 and decay rate (mm^2/s)."""

    s0_map: Volume3D
    adc_map: Volume3D

    def validate(self) -> "SignalModelParams":
        if self.s0_map.data.shape != self.adc_map.data.shape:
            raise ValueError("s0 and adc maps must share a shape")
        for name, vol in (("s0", self.s0_map), ("adc", self.adc_map)):
            if not np.all(np.isfinite(vol.data)):
                raise ValueError(f"{name} map contains non-finite values")
            if vol.data.min() < 0:
                raise ValueError(f"{name} map contains negative values")
        return self


@dataclass
class MixingConfig:
    """Synthetic b-values plus one mixing coefficient per signal.

    Coefficient order: natives first (ascending b), then synthetics
    (ascending b). `coefficients=None` means all ones.
    """

    synthetic_b_values: tuple[float, ...] = DEFAULT_SYNTHETIC_B_VALUES
    coefficients: tuple[float, ...] | None = None

    def resolve_coefficients(self, native_count: int) -> tuple[float, ...]:
        total = native_count + len(self.synthetic_b_values)
        if self.coefficients is None:
            return (1.0,) * total
        if len(self.coefficients) != total:
            raise ValueError(
                f"{len(self.coefficients)} coefficients for {native_count} native + "
                f"{len(self.synthetic_b_values)} synthetic signals"
            )
        coeffs = tuple(float(c) for c in self.coefficients)
        if not all(np.isfinite(coeffs)):
            raise ValueError("coefficients must be finite")
        return coeffs


@dataclass
class CdisVolume:
    """Mixed output volume with values in [0, 1] and its mixing provenance."""

    data: Volume3D
    config: MixingConfig = field(default_factory=MixingConfig)


def fit_signal_model(stack: DwiStack, floor: float = DEFAULT_SIGNAL_FLOOR) -> SignalModelParams:
    """Voxelwise OLS line through (b_i, ln max(S_i, floor)).

    S0 = exp(intercept), ADC = -slope clamped to >= 0.
    """
    stack.validate()
    if floor <= 0:
        raise ValueError(f"floor must be positive, got {floor}")
    signals = stack.as_array()  # (nb, W, H, D)
    b = np.asarray(stack.b_values, dtype=np.float64)
    y = np.log(np.maximum(signals, floor))

    b_centered = b - b.mean()
    denom = float(np.dot(b_centered, b_centered))  # > 0: b-values strictly increasing
    y_mean = y.mean(axis=0)
    slope = np.tensordot(b_centered, y - y_mean, axes=(0, 0)) / denom
    intercept = y_mean - slope * b.mean()

    adc = np.maximum(-slope, 0.0)
    s0 = np.maximum(np.exp(intercept), 0.0)
    spacing = stack.voxel_spacing
    return SignalModelParams(
        s0_map=Volume3D(s0, spacing, {"quantity": "s0"}),
        adc_map=Volume3D(adc, spacing, {"quantity": "adc_mm2_per_s"}),
    ).validate()


def synthesize_signal(params: SignalModelParams, b: float) -> Volume3D:
    """Evaluate S0 * exp(-b * ADC) voxelwise."""
    if b < 0:
        raise ValueError(f"b must be non-negative, got {b}")
    s0 = params.s0_map.data.astype(np.float64)
    adc = params.adc_map.data.astype(np.float64)
    data = s0 * np.exp(-b * adc)
    return Volume3D(data, params.s0_map.voxel_spacing, {"synthetic_b": float(b)})


def _log_mix(normalized: list[np.ndarray], coefficients: tuple[float, ...]) -> np.ndarray:
    """Sum of c_i * ln(n_i) with 0^0 := 1; -inf marks a true zero product."""
    total = np.zeros_like(normalized[0])
    for n, c in zip(normalized, coefficients):
        if c == 0.0:
            continue
        if c < 0.0:
            n = np.maximum(n, NEGATIVE_EXPONENT_FLOOR)
        with np.errstate(divide="ignore"):
            total = total + c * np.log(n)
    return total


def mix_signals(
    signals: list[Volume3D],
    coefficients: list[float] | tuple[float, ...],
    config: MixingConfig | None = None,
) -> CdisVolume:
    """Weighted geometric product of min-max-normalized signals, re-normalized to [0,1].

    Performed in the log domain and rescaled by the maximum before
    exponentiation, so the result is finite for any finite coefficients.
    """
    if not signals:
        raise ValueError("need at least one signal to mix")
    shape = signals[0].data.shape
    for vol in signals[1:]:
        if vol.data.shape != shape:
            raise ValueError(f"signal shapes differ: {vol.data.shape} vs {shape}")
    coeffs = tuple(float(c) for c in coefficients)
    if len(coeffs) != len(signals):
        raise ValueError(f"{len(coeffs)} coefficients for {len(signals)} signals")
    if not all(np.isfinite(coeffs)):
        raise ValueError("coefficients must be finite")

    normalized = [minmax_normalize(vol.data) for vol in signals]
    log_product = _log_mix(normalized, coeffs)

    hi = float(log_product.max())
    lo = float(log_product.min())
    if not np.isfinite(hi) or hi == lo:
        out = np.zeros(shape, dtype=np.float64)
    else:
        floor_term = np.exp(lo - hi)  # 0 when the product has a true zero
        out = (np.exp(log_product - hi) - floor_term) / (1.0 - floor_term)

    provenance = config if config is not None else MixingConfig((), coeffs)
    return CdisVolume(
        data=Volume3D(out, signals[0].voxel_spacing, {"modality": "cdis"}),
        config=provenance,
    )


def compute_adc_map(stack: DwiStack) -> Volume3D:
    return fit_signal_model(stack).adc_map


def compute_cdis(stack: DwiStack, config: MixingConfig | None = None) -> CdisVolume:
    """Fit, synthesize at the configured b-values, and mix with the natives."""
    stack.validate()
    if config is None:
        config = MixingConfig()
    coeffs = config.resolve_coefficients(len(stack.b_values))
    signals = list(stack.volumes)
    if config.synthetic_b_values:
        params = fit_signal_model(stack)
        for b in sorted(config.synthetic_b_values):
            signals.append(synthesize_signal(params, b))
    return mix_signals(signals, coeffs, config=config)
