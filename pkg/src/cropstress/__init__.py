"""Lightweight hybrid CNN with per-sample influence scoring and
removal-based unlearning, on a small numpy reverse-mode autodiff core."""

from .errors import (
    AnnotationParseError,
    ConfigError,
    ContractError,
    CropStressError,
    DimensionError,
    FormatError,
    NumericError,
    UninitializedStatisticsError,
    ValidationError,
)
from .model import (
    ArchitectureConfig,
    Model,
    build_model,
    count_parameters,
    expected_parameter_count,
)
from .serialize import load_model, save_model
from .tensor import ParameterStore, Tensor
from .train import TrainConfig, TrainLog, bce_loss, lr_at, steps_per_epoch, train
from .unlearn import (
    InfluenceRecord,
    RemovalPlan,
    influence_score,
    sample_gradient,
    score_dataset,
    select_removal,
    unlearn_retrain,
)
from .evaluate import ConfusionMatrix, MetricsReport, confusion, emit_report, metrics, predict_labels
from .data import (
    AugmentationConfig,
    DatasetManifest,
    ManifestRow,
    augment,
    extract_windows,
    parse_annotation,
    parse_manifest,
    split_validation,
    synth_dataset,
    write_manifest,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationParseError", "ArchitectureConfig", "AugmentationConfig", "ConfigError",
    "ConfusionMatrix", "ContractError", "CropStressError", "DatasetManifest",
    "DimensionError", "FormatError", "InfluenceRecord", "ManifestRow", "MetricsReport",
    "Model", "NumericError", "ParameterStore", "RemovalPlan", "Tensor", "TrainConfig",
    "TrainLog", "UninitializedStatisticsError", "ValidationError", "augment",
    "bce_loss", "build_model", "confusion", "count_parameters", "emit_report",
    "expected_parameter_count", "extract_windows", "influence_score", "load_model",
    "lr_at", "metrics", "parse_annotation", "parse_manifest", "predict_labels",
    "sample_gradient", "save_model", "score_dataset", "select_removal",
    "split_validation", "steps_per_epoch", "synth_dataset", "train",
    "unlearn_retrain", "write_manifest",
]
