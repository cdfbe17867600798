"""facedet: a desk-scale two-stage face detector built from first principles.

Anchors, proposal generation, RoI pooling, a center-loss-augmented multi-task
objective, balanced online hard example mining, multi-scale inference, and
ROC/PR evaluation, all on a small hand-differentiated CNN over synthetic
blob-face scenes.
"""

from .config import Config, ConfigError, parse_config, serialize_config, validate_config
from .detector import (
    DetectorModel,
    StepReport,
    TrainState,
    detect,
    detect_dataset,
    detect_multiscale,
    load_checkpoint,
    make_train_state,
    restore_train_state,
    save_checkpoint,
    train_step,
)
from .evaluation import (
    Ellipse,
    FormatError,
    PrPoint,
    RocPoint,
    continuous_roc,
    discrete_roc,
    ellipse_to_box,
    match_detections,
    pr_curve_ap,
    tpr_at_fp,
)
from .geometry import (
    AnchorSpec,
    Box,
    Delta,
    Detection,
    clip_box,
    decode_delta,
    encode_delta,
    generate_anchors,
    iou,
    nms,
)
from .losses import (
    Centers,
    LossReport,
    LossWeights,
    center_loss,
    multitask_loss,
    smooth_l1,
    softmax_ce,
    update_centers,
)
from .matching import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    LabeledSample,
    OhemConfig,
    label_anchors,
    label_proposals,
    ohem_select,
)
from .pyramid import ScaleSet, merge_multiscale, pick_training_scale, resize_image
from .synthdata import SceneSpec, generate_scene, write_dataset

__version__ = "0.1.0"

__all__ = [
    "AnchorSpec",
    "Box",
    "Centers",
    "Config",
    "ConfigError",
    "Delta",
    "Detection",
    "DetectorModel",
    "Ellipse",
    "FormatError",
    "IGNORE",
    "LabeledSample",
    "LossReport",
    "LossWeights",
    "NEGATIVE",
    "OhemConfig",
    "POSITIVE",
    "PrPoint",
    "RocPoint",
    "ScaleSet",
    "SceneSpec",
    "StepReport",
    "TrainState",
    "center_loss",
    "clip_box",
    "continuous_roc",
    "decode_delta",
    "detect",
    "detect_dataset",
    "detect_multiscale",
    "discrete_roc",
    "ellipse_to_box",
    "encode_delta",
    "generate_anchors",
    "generate_scene",
    "iou",
    "label_anchors",
    "label_proposals",
    "load_checkpoint",
    "make_train_state",
    "match_detections",
    "merge_multiscale",
    "multitask_loss",
    "nms",
    "ohem_select",
    "parse_config",
    "pick_training_scale",
    "pr_curve_ap",
    "resize_image",
    "restore_train_state",
    "save_checkpoint",
    "serialize_config",
    "smooth_l1",
    "softmax_ce",
    "tpr_at_fp",
    "train_step",
    "update_centers",
    "validate_config",
    "write_dataset",
]
