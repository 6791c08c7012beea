"""Multi-scale feature extraction and fusion for online knowledge distillation."""
from .attention import AttentionConfig, DualAttention
from .core_types import ConfigError, ShapeError, init_parameters, make_rng, validate_feature_map
from .data import AugmentPolicy, DatasetSpec, LabeledSet, load_cifar, load_dataset, synth_blobs
from .estimator import MFEFClassifier
from .fusion import FeatureFusion, FusionConfig
from .losses import LossBreakdown, NonFiniteLossError, ramp_weight, softmax_t, total_loss
from .models import ArchSpec, arch_spec, build_cohort
from .msfe import MsfeConfig, MultiScaleExtraction
from .trainer import CohortConfig, TrainReport, evaluate, lr_at, run_ablation, train, train_step

__all__ = [
    "AttentionConfig", "ArchSpec", "AugmentPolicy", "CohortConfig", "ConfigError", "DatasetSpec",
    "DualAttention", "FeatureFusion", "FusionConfig", "LabeledSet", "LossBreakdown", "MFEFClassifier",
    "MsfeConfig", "MultiScaleExtraction", "NonFiniteLossError", "ShapeError", "TrainReport", "arch_spec",
    "build_cohort", "evaluate", "init_parameters", "load_cifar", "load_dataset", "lr_at", "make_rng",
    "ramp_weight", "run_ablation", "softmax_t", "synth_blobs", "total_loss", "train", "train_step",
    "validate_feature_map",
]
