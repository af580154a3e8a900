"""Volumetric deep-radiomics grading of breast MRI from correlated diffusion volumes."""

from .backbone import (
    Backbone,
    BackboneConfig,
    FeatureVector,
    build_backbone,
    extract_features,
    load_weights,
    pretrain_backbone,
    save_weights,
)
from .cdis_synth import (
    CdisVolume,
    DwiStack,
    MixingConfig,
    SignalModelParams,
    compute_adc_map,
    compute_cdis,
    fit_signal_model,
    mix_signals,
    synthesize_signal,
)
from .config import ExperimentConfig, load_config
from .evalkit import (
    ComparisonTable,
    ConfusionMatrix,
    FoldResult,
    MetricsReport,
    ModalityRunConfig,
    compare_modalities,
    compute_metrics,
    confusion_matrix,
    loocv_folds,
    run_loocv,
)
from .grade_head import (
    ClassWeighting,
    HeadConfig,
    TrainedHead,
    predict_grade,
    predict_proba,
    train_head,
)
from .ingest import (
    CategorizedGrade,
    Modality,
    PatientRecord,
    SbrGrade,
    Volume3D,
    categorize_grade,
    cohort_summary,
    load_manifest,
    load_volume,
    save_volume,
)
from .phantomgen import BoxRegion, PhantomSpec, ToyCohortSpec, make_dwi_phantom, make_toy_cohort
from .volumizer import (
    StandardCube,
    normalize_intensity,
    resample_inplane,
    standardize,
    standardize_depth,
)

__version__ = "0.1.0"
