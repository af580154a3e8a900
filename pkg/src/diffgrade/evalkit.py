"""Leave-one-out evaluation, confusion-matrix metrics, and modality comparison.

Metrics are computed in exact rational arithmetic and rounded half-up only at
presentation (two decimals), so integer confusion matrices reproduce reported
percentages digit for digit. Positive class = High. Undefined sensitivity or
specificity (empty class) is reported as "n/a", never as a number.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping

from .backbone import BackboneConfig, FeatureVector
from .cdis_synth import MixingConfig
from .grade_head import (
    ClassWeighting,
    HeadConfig,
    TrainedHead,
    derive_fold_config,
    predict_grade,
    predict_proba,
    train_head,
)
from .ingest import CategorizedGrade, Modality

logger = logging.getLogger(__name__)


def loocv_folds(n: int) -> list[tuple[list[int], int]]:
    """Fold i holds out index i and trains on all others."""
    if n < 2:
        raise ValueError(f"leave-one-out needs n >= 2, got {n}")
    return [([j for j in range(n) if j != i], i) for i in range(n)]


@dataclass(frozen=True)
class FoldResult:
    patient_id: str
    true_label: CategorizedGrade
    predicted_label: CategorizedGrade
    probability: float


def run_loocv(
    features: list[FeatureVector],
    labels: list[CategorizedGrade],
    head_config: HeadConfig | None = None,
    seed: int = 0,
) -> list[FoldResult]:
    """Retrain a fresh head per fold (fold seed = run seed XOR fold index).

    The backbone is frozen upstream: this operates on extracted features only.
    A single-class train split under inverse-frequency weighting falls back to
    unweighted training with a logged warning.
    """
    if head_config is None:
        head_config = HeadConfig()
    if len(features) != len(labels):
        raise ValueError(f"{len(features)} features but {len(labels)} labels")
    results: list[FoldResult] = []
    for train_idx, test_idx in loocv_folds(len(features)):
        fold_config = derive_fold_config(head_config, seed, test_idx)
        train_labels = [labels[i] for i in train_idx]
        if (
            fold_config.class_weighting is ClassWeighting.INVERSE_FREQUENCY
            and len(set(train_labels)) < 2
        ):
            logger.warning(
                "fold %d: single-class train split, falling back to unweighted loss", test_idx
            )
            fold_config = replace(fold_config, class_weighting=ClassWeighting.NONE)
        head = train_head([features[i] for i in train_idx], train_labels, fold_config)
        held_out = features[test_idx]
        results.append(
            FoldResult(
                patient_id=held_out.patient_id,
                true_label=labels[test_idx],
                predicted_label=predict_grade(head, held_out),
                probability=predict_proba(head, held_out),
            )
        )
    return results


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fn": self.fn, "tn": self.tn, "fp": self.fp}


def confusion_matrix(results: list[FoldResult]) -> ConfusionMatrix:
    if not results:
        raise ValueError("no fold results")
    tp = fn = tn = fp = 0
    for r in results:
        if r.true_label is CategorizedGrade.HIGH:
            if r.predicted_label is CategorizedGrade.HIGH:
                tp += 1
            else:
                fn += 1
        else:
            if r.predicted_label is CategorizedGrade.HIGH:
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp=tp, fn=fn, tn=tn, fp=fp)


def format_percent(value: Fraction | None) -> str:
    """Exact half-up rounding of a [0,1] rational as a 2-decimal percentage."""
    if value is None:
        return "n/a"
    scaled = value * 10000  # hundredths of a percent
    n, d = scaled.numerator, scaled.denominator
    hundredths = (2 * n + d) // (2 * d)  # floor(scaled + 1/2)
    return f"{hundredths // 100}.{hundredths % 100:02d}"


@dataclass(frozen=True)
class MetricsReport:
    accuracy: Fraction
    sensitivity: Fraction | None
    specificity: Fraction | None

    @property
    def accuracy_pct(self) -> str:
        return format_percent(self.accuracy)

    @property
    def sensitivity_pct(self) -> str:
        return format_percent(self.sensitivity)

    @property
    def specificity_pct(self) -> str:
        return format_percent(self.specificity)

    def as_dict(self) -> dict:
        def exact(v: Fraction | None) -> str | None:
            return None if v is None else f"{v.numerator}/{v.denominator}"

        return {
            "accuracy_pct": self.accuracy_pct,
            "sensitivity_pct": self.sensitivity_pct,
            "specificity_pct": self.specificity_pct,
            "accuracy_exact": exact(self.accuracy),
            "sensitivity_exact": exact(self.sensitivity),
            "specificity_exact": exact(self.specificity),
        }


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    if min(cm.tp, cm.fn, cm.tn, cm.fp) < 0:
        raise ValueError("confusion counts must be non-negative")
    accuracy = Fraction(cm.tp + cm.tn, cm.total)
    sensitivity = Fraction(cm.tp, cm.tp + cm.fn) if cm.tp + cm.fn > 0 else None
    specificity = Fraction(cm.tn, cm.tn + cm.fp) if cm.tn + cm.fp > 0 else None
    return MetricsReport(accuracy=accuracy, sensitivity=sensitivity, specificity=specificity)


@dataclass
class ModalityRunConfig:
    modality: Modality
    backbone_config: BackboneConfig = field(default_factory=BackboneConfig)
    head_config: HeadConfig = field(default_factory=HeadConfig)
    mixing_config: MixingConfig | None = None
    seed: int = 0

    def validate(self) -> "ModalityRunConfig":
        if (self.modality is Modality.CDIS) != (self.mixing_config is not None):
            raise ValueError("mixing_config must be present iff modality is cdis")
        return self


@dataclass
class ModalityRow:
    modality: Modality
    metrics: MetricsReport
    confusion: ConfusionMatrix
    fold_results: list[FoldResult]
    cohort_size: int
    seed: int


@dataclass
class ComparisonTable:
    rows: list[ModalityRow]
    patient_ids: list[str]

    def to_csv(self) -> str:
        lines = ["modality,accuracy,sensitivity,specificity"]
        for row in self.rows:
            m = row.metrics
            lines.append(
                f"{row.modality.value},{m.accuracy_pct},{m.sensitivity_pct},{m.specificity_pct}"
            )
        return "\n".join(lines) + "\n"


def fold_results_csv(results: list[FoldResult]) -> str:
    lines = ["patient_id,true_label,predicted_label,probability"]
    for r in results:
        lines.append(
            f"{r.patient_id},{r.true_label.value},{r.predicted_label.value},{r.probability!r}"
        )
    return "\n".join(lines) + "\n"


def compare_modalities(
    configs: list[ModalityRunConfig],
    features_by_modality: Mapping[Modality, list[FeatureVector]],
    labels_by_patient: Mapping[str, CategorizedGrade],
) -> ComparisonTable:
    """LOOCV each modality on the common cohort; rows sorted best accuracy first."""
    if not configs:
        raise ValueError("no modality configs")
    for config in configs:
        config.validate()

    common = set(labels_by_patient)
    for config in configs:
        if config.modality not in features_by_modality:
            raise ValueError(f"no features for modality {config.modality.value}")
        common &= {f.patient_id for f in features_by_modality[config.modality]}
    if not common:
        raise ValueError("empty common cohort across the requested modalities")
    ordered_ids = sorted(common)

    rows = []
    for config in configs:
        by_id = {f.patient_id: f for f in features_by_modality[config.modality]}
        features = [by_id[pid] for pid in ordered_ids]
        labels = [labels_by_patient[pid] for pid in ordered_ids]
        results = run_loocv(features, labels, config.head_config, seed=config.seed)
        cm = confusion_matrix(results)
        rows.append(
            ModalityRow(
                modality=config.modality,
                metrics=compute_metrics(cm),
                confusion=cm,
                fold_results=results,
                cohort_size=len(ordered_ids),
                seed=config.seed,
            )
        )
    rows.sort(key=lambda row: row.metrics.accuracy, reverse=True)
    return ComparisonTable(rows=rows, patient_ids=ordered_ids)
