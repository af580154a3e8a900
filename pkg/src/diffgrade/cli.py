"""Command-line orchestration of the full grading workflow.

Subcommands: synth (DWI stacks -> mixed diffusion volumes), extract
(volumes -> deep feature matrices), loocv (features -> fold results,
metrics, comparison table), report (render persisted results; no
recomputation). Exit codes: 0 success, 1 fatal, 2 partial success with skips.

Run directories are content-addressed by config hash; re-runs with an
unchanged config skip finished artifacts and reproduce byte-identical
reports. Reports carry no wall-clock fields; timestamps live in
run_meta.json and the log only.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import evalkit
from .cdis_synth import DwiStack, compute_cdis
from .checkpoint import CheckpointError, file_digest
from .config import ConfigError, ExperimentConfig, load_config
from .grade_head import HeadConfig
from .ingest import (
    ManifestError,
    Modality,
    PatientRecord,
    VolumeFormatError,
    categorize_grade,
    load_manifest,
    load_volume,
    save_volume_raw,
)
from .volumizer import standardize

logger = logging.getLogger("diffgrade")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


def _json_dump(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def prepare_run_dir(config: ExperimentConfig) -> Path:
    run_dir = Path(config.output_dir) / f"run-{config.config_hash()[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = run_dir / "config.json"
    if not snapshot.exists() and config.source_path is not None:
        snapshot.write_bytes(Path(config.source_path).read_bytes())
    effective = run_dir / "effective_config.json"
    if not effective.exists():
        _json_dump(effective, config.canonical_dict())
    meta = run_dir / "run_meta.json"
    if not meta.exists():
        _json_dump(
            meta,
            {
                "config_hash": config.config_hash(),
                "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            },
        )
    return run_dir


def _attach_file_log(run_dir: Path, level: str) -> None:
    root = logging.getLogger()
    root.setLevel(level.upper())
    log_path = run_dir / "log.txt"
    if not any(
        isinstance(h, logging.FileHandler) and h.baseFilename == str(log_path)
        for h in root.handlers
    ):
        handler = logging.FileHandler(log_path)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
        root.addHandler(handler)


def _modality_volume_path(record: PatientRecord, modality: Modality, run_dir: Path) -> Path | None:
    if modality is Modality.CDIS:
        synthesized = run_dir / "cdis" / f"{record.patient_id}.vol"
        if synthesized.exists():
            return synthesized
    if record.has(modality) and modality is not Modality.DWI:
        return Path(record.single_path(modality))
    if modality is Modality.DWI and record.has(Modality.DWI):
        # representative DWI volume: the highest-b acquisition
        return Path(record.dwi_paths[-1])
    return None


def cmd_synth(config: ExperimentConfig, run_dir: Path) -> int:
    records = load_manifest(config.manifest_path)
    out_dir = run_dir / "cdis"
    out_dir.mkdir(exist_ok=True)
    produced = skipped = failed = 0
    for record in records:
        if not record.has(Modality.DWI):
            logger.warning("%s: no DWI stack in manifest, skipping", record.patient_id)
            skipped += 1
            continue
        out_path = out_dir / f"{record.patient_id}.vol"
        if out_path.exists():
            logger.info("%s: output exists, skipping recomputation", record.patient_id)
            produced += 1
            continue
        try:
            volumes = [load_volume(p) for p in record.dwi_paths]
            stack = DwiStack(b_values=record.b_values, volumes=volumes).validate()
            result = compute_cdis(stack, config.mixing)
            save_volume_raw(out_path, result.data)
            produced += 1
        except (VolumeFormatError, ValueError, OSError) as exc:
            logger.warning("%s: synthesis failed (%s), skipping", record.patient_id, exc)
            failed += 1
    logger.info("synth: %d produced, %d skipped, %d failed", produced, skipped, failed)
    if produced == 0:
        logger.error("synth produced no volumes")
        return EXIT_FATAL
    return EXIT_PARTIAL if (skipped or failed) else EXIT_OK


def _load_backbone(config: ExperimentConfig, run_dir: Path) -> tuple[bb.Backbone, str]:
    if config.backbone_checkpoint:
        path = Path(config.backbone_checkpoint)
        net = bb.load_weights(path, config.backbone)
        return net, file_digest(path)
    ckpt = run_dir / "checkpoints" / "backbone.ckpt"
    if ckpt.exists():
        return bb.load_weights(ckpt, config.backbone), file_digest(ckpt)
    net = bb.build_backbone(config.backbone)
    bb.save_weights(net, ckpt)
    return net, file_digest(ckpt)


def _cohort_hash(entries: list[tuple[str, Path]]) -> str:
    digest = hashlib.sha256()
    for pid, path in entries:
        digest.update(pid.encode())
        digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()


def cmd_extract(config: ExperimentConfig, run_dir: Path) -> int:
    records = load_manifest(config.manifest_path)
    net, weights_digest = _load_backbone(config, run_dir)
    feat_dir = run_dir / "features"
    feat_dir.mkdir(exist_ok=True)
    any_skip = False
    produced_modalities = 0

    for modality in config.modalities:
        entries: list[tuple[str, Path]] = []
        for record in records:
            path = _modality_volume_path(record, modality, run_dir)
            if path is None or not path.exists():
                logger.warning(
                    "%s: no %s volume available, skipping", record.patient_id, modality.value
                )
                any_skip = True
                continue
            entries.append((record.patient_id, path))
        if not entries:
            logger.error("no volumes available for modality %s", modality.value)
            continue
        entries.sort(key=lambda e: e[0])

        cohort = _cohort_hash(entries)
        matrix_path = feat_dir / f"{modality.value}_features.npy"
        ids_path = feat_dir / f"{modality.value}_patients.json"
        meta_path = feat_dir / f"{modality.value}_meta.json"
        if matrix_path.exists() and meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if meta.get("weights_digest") == weights_digest and meta.get("cohort_hash") == cohort:
                if file_digest(matrix_path) == meta.get("matrix_digest"):
                    logger.info("%s: feature cache hit", modality.value)
                    produced_modalities += 1
                    continue
                logger.warning("%s: corrupted feature cache, recomputing", modality.value)

        cubes = []
        for pid, path in entries:
            volume = load_volume(path)
            cubes.append(standardize(volume, pid, *config.cube_shape))
        features = bb.extract_features(net, cubes)
        matrix = np.stack([f.values for f in features]).astype(np.float32)
        np.save(matrix_path, matrix)
        with open(ids_path, "w", encoding="utf-8") as fh:
            json.dump([pid for pid, _ in entries], fh)
            fh.write("\n")
        _json_dump(
            meta_path,
            {
                "modality": modality.value,
                "weights_digest": weights_digest,
                "cohort_hash": cohort,
                "matrix_digest": file_digest(matrix_path),
                "feature_dim": int(matrix.shape[1]),
                "patients": len(entries),
            },
        )
        logger.info("%s: extracted %d x %d features", modality.value, *matrix.shape)
        produced_modalities += 1

    if produced_modalities == 0:
        return EXIT_FATAL
    if any_skip or produced_modalities < len(config.modalities):
        return EXIT_PARTIAL
    return EXIT_OK


def _load_features(run_dir: Path, modality: Modality) -> list[bb.FeatureVector]:
    feat_dir = run_dir / "features"
    matrix_path = feat_dir / f"{modality.value}_features.npy"
    ids_path = feat_dir / f"{modality.value}_patients.json"
    if not matrix_path.exists() or not ids_path.exists():
        raise FileNotFoundError(
            f"no extracted features for {modality.value} in {run_dir} (run extract first)"
        )
    matrix = np.load(matrix_path)
    ids = json.loads(ids_path.read_text())
    return [bb.FeatureVector(values=row, patient_id=pid) for pid, row in zip(ids, matrix)]


def cmd_loocv(config: ExperimentConfig, run_dir: Path) -> int:
    records = load_manifest(config.manifest_path)
    labels_by_patient = {r.patient_id: categorize_grade(r.grade) for r in records}
    features_by_modality = {m: _load_features(run_dir, m) for m in config.modalities}

    run_configs = [
        evalkit.ModalityRunConfig(
            modality=m,
            backbone_config=config.backbone,
            head_config=config.head,
            mixing_config=config.mixing if m is Modality.CDIS else None,
            seed=config.seed,
        )
        for m in config.modalities
    ]
    table = evalkit.compare_modalities(run_configs, features_by_modality, labels_by_patient)

    loocv_dir = run_dir / "loocv"
    loocv_dir.mkdir(exist_ok=True)
    for row in table.rows:
        folds_path = loocv_dir / f"{row.modality.value}_folds.csv"
        folds_path.write_text(evalkit.fold_results_csv(row.fold_results))
        _json_dump(
            loocv_dir / f"{row.modality.value}_metrics.json",
            {
                "modality": row.modality.value,
                "metrics": row.metrics.as_dict(),
                "confusion": row.confusion.as_dict(),
                "cohort_size": row.cohort_size,
                "seed": row.seed,
            },
        )
    (run_dir / "comparison.csv").write_text(table.to_csv())
    _json_dump(
        run_dir / "comparison.json",
        {
            "cohort_size": len(table.patient_ids),
            "patient_ids": table.patient_ids,
            "rows": [
                {
                    "modality": row.modality.value,
                    "metrics": row.metrics.as_dict(),
                    "confusion": row.confusion.as_dict(),
                    "seed": row.seed,
                }
                for row in table.rows
            ],
            "config": config.canonical_dict(),
        },
    )
    logger.info("loocv: %d modality row(s) over %d patients", len(table.rows), len(table.patient_ids))
    return EXIT_OK


def cmd_report(run_dir: Path) -> int:
    comparison = run_dir / "comparison.json"
    if not comparison.exists():
        logger.error("incomplete run directory: %s has no comparison.json (run loocv)", run_dir)
        return EXIT_FATAL
    doc = json.loads(comparison.read_text())
    for row in doc["rows"]:
        folds = run_dir / "loocv" / f"{row['modality']}_folds.csv"
        if not folds.exists():
            logger.error("incomplete run directory: missing fold results %s", folds)
            return EXIT_FATAL

    widths = (10, 10, 13, 13)
    header = ("Modality", "Accuracy", "Sensitivity", "Specificity")
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in doc["rows"]:
        m = row["metrics"]
        cells = (
            row["modality"],
            m["accuracy_pct"],
            m["sensitivity_pct"],
            m["specificity_pct"],
        )
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(cells, widths)))
    lines.append(f"cohort size: {doc['cohort_size']}")
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffgrade",
        description="Volumetric deep-radiomics grading pipeline for diffusion MRI",
    )
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--output-dir", help="override the config's output directory")
    parser.add_argument("--seed", type=int, help="override the config's seed")
    parser.add_argument(
        "--modality",
        action="append",
        choices=[m.value for m in Modality],
        help="restrict to a modality (repeatable)",
    )
    parser.add_argument("--log-level", default=None, help="logging level (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="synthesize mixed diffusion volumes from DWI stacks")
    sub.add_parser("extract", help="extract deep feature matrices per modality")
    sub.add_parser("loocv", help="leave-one-out evaluation and comparison table")
    report = sub.add_parser("report", help="render a completed run directory")
    report.add_argument("run_dir", help="run directory to render")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or "INFO").upper(),
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )

    if args.command == "report":
        return cmd_report(Path(args.run_dir))

    if not args.config:
        logger.error("--config is required for %s", args.command)
        return EXIT_FATAL
    try:
        config = load_config(
            args.config,
            seed_override=args.seed,
            modalities_override=args.modality,
            output_dir_override=args.output_dir,
            log_level_override=args.log_level,
        )
        run_dir = prepare_run_dir(config)
        _attach_file_log(run_dir, config.log_level)
        if args.command == "synth":
            return cmd_synth(config, run_dir)
        if args.command == "extract":
            return cmd_extract(config, run_dir)
        if args.command == "loocv":
            return cmd_loocv(config, run_dir)
    except (ConfigError, ManifestError, VolumeFormatError, CheckpointError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_FATAL
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_FATAL
    logger.error("unknown command %r", args.command)
    return EXIT_FATAL


if __name__ == "__main__":
    raise SystemExit(main())
