"""Experiment configuration: one JSON document drives the whole workflow.

All randomness flows from the single top-level seed: component seeds default
to it, and per-fold seeds are derived as seed XOR fold index downstream. The
config hash covers every semantically meaningful field (paths normalized);
output location and log level are excluded.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .cdis_synth import MixingConfig
from .grade_head import ClassWeighting, HeadConfig
from .ingest import Modality
from .volumizer import STANDARD_DEPTH, STANDARD_HEIGHT, STANDARD_WIDTH


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    manifest_path: str
    modalities: list[Modality] = field(default_factory=lambda: [Modality.CDIS])
    mixing: MixingConfig = field(default_factory=MixingConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    backbone_checkpoint: str | None = None
    head: HeadConfig = field(default_factory=HeadConfig)
    seed: int = 0
    output_dir: str = "runs"
    log_level: str = "INFO"
    cube_shape: tuple[int, int, int] = (STANDARD_WIDTH, STANDARD_HEIGHT, STANDARD_DEPTH)
    source_path: Path | None = None  # where the JSON came from; not hashed

    def validate(self) -> "ExperimentConfig":
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("duplicate modalities requested")
        self.backbone.validate()
        self.head.validate()
        if self.head.layer_dims[0] != self.backbone.feature_dim:
            raise ConfigError(
                f"head input dim {self.head.layer_dims[0]} must equal backbone "
                f"feature_dim {self.backbone.feature_dim}"
            )
        if any(d < 1 for d in self.cube_shape) or len(self.cube_shape) != 3:
            raise ConfigError(f"cube_shape must be 3 positive ints, got {self.cube_shape}")
        return self

    def canonical_dict(self) -> dict:
        return {
            "manifest_path": os.path.normpath(self.manifest_path),
            "modalities": [m.value for m in self.modalities],
            "mixing": {
                "synthetic_b_values": list(self.mixing.synthetic_b_values),
                "coefficients": (
                    None if self.mixing.coefficients is None else list(self.mixing.coefficients)
                ),
            },
            "backbone": {**self.backbone.structural_dict(), "seed": self.backbone.seed},
            "backbone_checkpoint": (
                None if self.backbone_checkpoint is None
                else os.path.normpath(self.backbone_checkpoint)
            ),
            "head": self.head.as_dict(),
            "seed": self.seed,
            "cube_shape": list(self.cube_shape),
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def _parse_modalities(tokens: list) -> list[Modality]:
    out = []
    for token in tokens:
        try:
            out.append(Modality(token))
        except ValueError:
            raise ConfigError(f"unknown modality {token!r} (expected cdis/dwi/t2w/adc)") from None
    return out


def load_config(
    path: str | Path,
    seed_override: int | None = None,
    modalities_override: list[str] | None = None,
    output_dir_override: str | None = None,
    log_level_override: str | None = None,
) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if "manifest_path" not in doc:
        raise ConfigError(f"{path}: manifest_path is required")

    seed = int(doc.get("seed", 0)) if seed_override is None else seed_override

    mixing_doc = doc.get("mixing", {}) or {}
    mixing = MixingConfig(
        synthetic_b_values=tuple(float(b) for b in mixing_doc.get("synthetic_b_values", MixingConfig().synthetic_b_values)),
        coefficients=(
            None
            if mixing_doc.get("coefficients") is None
            else tuple(float(c) for c in mixing_doc["coefficients"])
        ),
    )

    bb_doc = doc.get("backbone", {}) or {}
    backbone = BackboneConfig(
        block_counts=tuple(bb_doc.get("block_counts", (3, 4, 6, 3))),
        stage_channels=tuple(bb_doc.get("stage_channels", (64, 128, 256, 512))),
        input_channels=int(bb_doc.get("input_channels", 1)),
        feature_dim=int(bb_doc.get("feature_dim", bb_doc.get("stage_channels", [64, 128, 256, 512])[-1])),
        seed=int(bb_doc["seed"]) if bb_doc.get("seed") is not None else seed,
    )

    head_doc = doc.get("head", {}) or {}
    head = HeadConfig(
        layer_dims=tuple(head_doc.get("layer_dims", (backbone.feature_dim, 128, 1))),
        dropout_rate=float(head_doc.get("dropout_rate", 0.2)),
        learning_rate=float(head_doc.get("learning_rate", 1e-3)),
        epochs=int(head_doc.get("epochs", 100)),
        class_weighting=ClassWeighting(head_doc.get("class_weighting", "InverseFrequency")),
        threshold=float(head_doc.get("threshold", 0.5)),
        seed=int(head_doc["seed"]) if head_doc.get("seed") is not None else seed,
    )

    modalities_raw = (
        modalities_override if modalities_override is not None else doc.get("modalities", ["cdis"])
    )

    config = ExperimentConfig(
        manifest_path=str(doc["manifest_path"]),
        modalities=_parse_modalities(list(modalities_raw)),
        mixing=mixing,
        backbone=backbone,
        backbone_checkpoint=bb_doc.get("checkpoint"),
        head=head,
        seed=seed,
        output_dir=str(
            output_dir_override if output_dir_override is not None else doc.get("output_dir", "runs")
        ),
        log_level=str(
            log_level_override if log_level_override is not None else doc.get("log_level", "INFO")
        ),
        cube_shape=tuple(doc.get("cube_shape", (STANDARD_WIDTH, STANDARD_HEIGHT, STANDARD_DEPTH))),
        source_path=path,
    )
    return config.validate()
