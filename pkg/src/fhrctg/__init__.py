"""Desk-scale cardiotocography analysis: preprocessing, sequence tagging with
a CRF decoder, variability classification, masked-recovery pretraining, and
interval-overlap evaluation, plus a deterministic synthetic generator."""

from .estimator import CtgAnnotator, CtgFeatureExtractor, check_records
from .metrics import fischer_bpm, fischer_cpm, roc_auc
from .model import (
    FhrctgModel,
    Prediction,
    build_model,
    load_checkpoint,
    predict_record,
    run_pretraining,
    run_supervised_training,
    save_checkpoint,
)
from .preprocess import FeatureBundle, MaskSpec, build_features, make_pretrain_sample
from .synth import SynthParams, generate_dataset, generate_record
from .types import (
    AnnotationSpan,
    EngineConfig,
    FhrRecord,
    SpanKind,
    tags_from_annotations,
    validate_record,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationSpan",
    "CtgAnnotator",
    "CtgFeatureExtractor",
    "EngineConfig",
    "FeatureBundle",
    "FhrRecord",
    "FhrctgModel",
    "MaskSpec",
    "Prediction",
    "SpanKind",
    "SynthParams",
    "build_features",
    "build_model",
    "check_records",
    "fischer_bpm",
    "fischer_cpm",
    "generate_dataset",
    "generate_record",
    "load_checkpoint",
    "make_pretrain_sample",
    "predict_record",
    "roc_auc",
    "run_pretraining",
    "run_supervised_training",
    "save_checkpoint",
    "tags_from_annotations",
    "validate_record",
]
