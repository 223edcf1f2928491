"""Pixel-wise rotated-box hand detection toolkit.

Dense per-pixel box geometry (score / rotation / four side distances), the
codec between boxes and maps, cascaded feature fusion with prediction heads,
training losses with analytic gradients, NMS decoding, two
tracking-by-detection linkers and the standard detection and tracking metrics.
"""

from .errors import (
    ConfigError,
    DegenerateGeometryError,
    EvaluationError,
    GenerationError,
    ParseError,
    PixelhandError,
)
from .evaluation import (
    EvalReport,
    average_precision,
    average_recall,
    evaluate_detections,
    level_filter,
    match_detections,
    split_by_level,
)
from .fusion import (
    FusionConfig,
    FusionWeights,
    bff_block,
    build_pyramid,
    cascade,
    head,
    hff_block,
    highlight_mask,
    infer_config,
    load_weights,
    make_random_weights,
    save_weights,
)
from .geometry import (
    GeometryMaps,
    PixelGeometry,
    RotatedBox,
    box_from_center,
    encode_ground_truth,
    load_axis_aligned,
    load_boxes,
    nms,
    restore_box,
    restore_vertices,
    rotated_iou,
    save_boxes,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    ScaleLoss,
    breakdown,
    dice_loss,
    iou_loss,
    rotation_loss,
    scale_loss,
    total_loss,
)
from .pipeline import (
    decode,
    generate_scene,
    generate_sequence,
    load_maps,
    save_maps,
)
from .tensor import ConvKernel, Tensor, conv2d, sigmoid, upsample2x
from .tracking import (
    MotReport,
    SortTracker,
    Track,
    iou_track,
    load_mot,
    mot_metrics,
    run_sort,
    save_mot,
    sort_step,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConvKernel",
    "DegenerateGeometryError",
    "EvalReport",
    "EvaluationError",
    "FusionConfig",
    "FusionWeights",
    "GenerationError",
    "GeometryMaps",
    "LossBreakdown",
    "LossWeights",
    "MotReport",
    "ParseError",
    "PixelGeometry",
    "PixelhandError",
    "RotatedBox",
    "ScaleLoss",
    "SortTracker",
    "Tensor",
    "Track",
    "average_precision",
    "average_recall",
    "bff_block",
    "box_from_center",
    "breakdown",
    "build_pyramid",
    "cascade",
    "conv2d",
    "decode",
    "dice_loss",
    "encode_ground_truth",
    "evaluate_detections",
    "generate_scene",
    "generate_sequence",
    "head",
    "hff_block",
    "highlight_mask",
    "infer_config",
    "iou_loss",
    "iou_track",
    "level_filter",
    "load_axis_aligned",
    "load_boxes",
    "load_maps",
    "load_mot",
    "load_weights",
    "make_random_weights",
    "match_detections",
    "mot_metrics",
    "nms",
    "restore_box",
    "restore_vertices",
    "rotated_iou",
    "rotation_loss",
    "run_sort",
    "save_boxes",
    "save_maps",
    "save_mot",
    "save_weights",
    "scale_loss",
    "sigmoid",
    "sort_step",
    "split_by_level",
    "total_loss",
    "upsample2x",
]
