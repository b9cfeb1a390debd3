"""Open-world LIDAR point-cloud segmentation: open-set recognition through
redundancy classifiers with synthesized unknowns, plus incremental learning
over pseudo-label unions."""

from .core import (
    UNKNOWN_ID,
    ClassRegistry,
    ConfigError,
    DomainError,
    FormatError,
    GenerationError,
    LabelDomain,
    LabelSet,
    LogitsBundle,
    NumericError,
    OpenWorldError,
    Scan,
    registry_advance,
)
from .data import (
    SceneConfig,
    ShapeSpec,
    default_scene_config,
    generate_scene,
    read_labels,
    read_scan,
    write_labels,
    write_scan,
)
from .evaluation import EvalReport, auroc, aupr, export_histogram, miou_report
from .incremental import (
    ILStagePlan,
    baseline_feature_extraction,
    baseline_finetune,
    make_pseudo_labels,
    predict_post_il,
    run_il_stage,
)
from .losses import (
    LossConfig,
    calibration_loss,
    closed_loss,
    cross_entropy,
    gradients,
    synthesis_loss,
    total_loss,
)
from .network import (
    ArchConfig,
    PointSegmenter,
    Stage,
    add_redundancy_heads,
    assemble_scores,
    init_model,
    load_checkpoint,
    reassign_rc,
    save_checkpoint,
)
from .openset import (
    InferenceConfig,
    calibrate_threshold,
    predict_closed,
    predict_open,
    unknown_score,
)
from .synthesis import SynthesisConfig, apply_synthesis, resize_instance

__version__ = "0.1.0"

__all__ = [
    "UNKNOWN_ID",
    "ArchConfig",
    "ClassRegistry",
    "ConfigError",
    "DomainError",
    "EvalReport",
    "FormatError",
    "GenerationError",
    "ILStagePlan",
    "InferenceConfig",
    "LabelDomain",
    "LabelSet",
    "LogitsBundle",
    "LossConfig",
    "NumericError",
    "OpenWorldError",
    "PointSegmenter",
    "Scan",
    "SceneConfig",
    "ShapeSpec",
    "Stage",
    "SynthesisConfig",
    "add_redundancy_heads",
    "apply_synthesis",
    "assemble_scores",
    "auroc",
    "aupr",
    "baseline_feature_extraction",
    "baseline_finetune",
    "calibrate_threshold",
    "calibration_loss",
    "closed_loss",
    "cross_entropy",
    "default_scene_config",
    "export_histogram",
    "generate_scene",
    "gradients",
    "init_model",
    "load_checkpoint",
    "make_pseudo_labels",
    "miou_report",
    "predict_closed",
    "predict_open",
    "predict_post_il",
    "read_labels",
    "read_scan",
    "reassign_rc",
    "registry_advance",
    "resize_instance",
    "run_il_stage",
    "save_checkpoint",
    "synthesis_loss",
    "total_loss",
    "unknown_score",
    "write_labels",
    "write_scan",
]
