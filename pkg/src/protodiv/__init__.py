"""Prototype-driven weakly supervised semantic segmentation for histology.

Class-wise prototype vectors are trained end-to-end from image-level labels
alone. Temperature-scaled cosine similarity against multi-scale features
yields prototype activation maps, attention-fused class CAMs, and thresholded
pseudo masks, refined by contrastive alignment of masked regions against the
bank and kept from collapsing by a Jeffrey-divergence diversity penalty.
"""

__version__ = "0.1.0"

from .config import (
    BankConfig,
    Config,
    ConfigError,
    CrfConfig,
    DiversityConfig,
    EncoderConfig,
    RefinerConfig,
    TrainerConfig,
    load_config,
)
from .crf import crf_refine, crf_refine_probs
from .data import DataError, Sample, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .diversity import (
    ClassRegion,
    class_diversity,
    class_regions_from_cam,
    diversity_loss,
    jeffrey_divergence,
    prototype_distribution,
)
from .encoder import EncoderSpec, FeaturePyramid, MultiScaleEncoder, ReferenceEncoder, encode
from .estimator import PrototypeSegmenter
from .metrics import (
    SegMetrics,
    confusion_counts,
    dice_from_iou,
    evaluate_label_maps,
    format_table,
    metrics_from_counts,
    metrics_row,
    write_tsv,
)
from .model import ProtoCamModel, RegionProjector
from .prototypes import (
    ActivationSet,
    PrototypeBank,
    aggregate_class_cams,
    build_activations,
    classification_loss,
    cosine_normalize,
    load_bank,
    save_bank,
    similarity_maps,
)
from .refiner import (
    ContrastiveResult,
    FusedCam,
    HashedStubEncoder,
    PseudoMask,
    RegionBatch,
    RegionEmbeddings,
    RegionEncoder,
    RegionEncoderError,
    SubprocessEncoderAdapter,
    contrastive_alignment,
    extract_regions,
    fuse_cams,
    info_nce,
    region_encode,
    threshold,
)
from .training import (
    LossRecord,
    NonFiniteLossError,
    TrainResult,
    Trainer,
    load_checkpoint,
    save_checkpoint,
    total_loss,
)

__all__ = [
    "ActivationSet",
    "BankConfig",
    "ClassRegion",
    "Config",
    "ConfigError",
    "ContrastiveResult",
    "CrfConfig",
    "DataError",
    "DiversityConfig",
    "EncoderConfig",
    "EncoderSpec",
    "FeaturePyramid",
    "FusedCam",
    "HashedStubEncoder",
    "LossRecord",
    "MultiScaleEncoder",
    "NonFiniteLossError",
    "ProtoCamModel",
    "PrototypeBank",
    "PrototypeSegmenter",
    "PseudoMask",
    "RefinerConfig",
    "RegionBatch",
    "RegionEmbeddings",
    "RegionEncoder",
    "RegionEncoderError",
    "RegionProjector",
    "ReferenceEncoder",
    "Sample",
    "SegMetrics",
    "SubprocessEncoderAdapter",
    "SyntheticSpec",
    "TrainResult",
    "Trainer",
    "TrainerConfig",
    "aggregate_class_cams",
    "build_activations",
    "class_diversity",
    "class_regions_from_cam",
    "classification_loss",
    "confusion_counts",
    "contrastive_alignment",
    "cosine_normalize",
    "crf_refine",
    "crf_refine_probs",
    "dice_from_iou",
    "diversity_loss",
    "encode",
    "evaluate_label_maps",
    "extract_regions",
    "format_table",
    "fuse_cams",
    "generate_synthetic",
    "info_nce",
    "jeffrey_divergence",
    "load_bank",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "metrics_from_counts",
    "metrics_row",
    "prototype_distribution",
    "region_encode",
    "save_bank",
    "save_checkpoint",
    "save_dataset",
    "similarity_maps",
    "threshold",
    "total_loss",
    "write_tsv",
]
