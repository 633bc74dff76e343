"""Alignment-free dense cross-modality distillation for paired-image
classification, with a synthetic misaligned-pair benchmark."""

__version__ = "0.1.0"

from .config import TrainConfig, load_config
from .data import PairedSample, generate_synthetic_pair, kfold_split, load_manifest
from .metrics import MetricsReport, compute_metrics
from .models import FeaturePyramid, PolypClassifier, compute_cam, extract
from .relations import SemanticMaps, build_relations

__all__ = [
    "TrainConfig",
    "load_config",
    "PairedSample",
    "generate_synthetic_pair",
    "kfold_split",
    "load_manifest",
    "MetricsReport",
    "compute_metrics",
    "FeaturePyramid",
    "PolypClassifier",
    "compute_cam",
    "extract",
    "SemanticMaps",
    "build_relations",
]
