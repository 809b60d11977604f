"""Occlusion-aware pedestrian detection maths: aggregation loss, part
occlusion-aware RoI pooling, anchor machinery, NMS and MR-2 evaluation."""

from .evaluation import (
    SUBSETS, Detection, EvalCurve, SweepResult, fppi_missrate_curve, get_subset,
    match_detections, mr2, nms, nms_sweep, subset_filter,
)
from .geometry import (
    AggregationGroups, AnchorSet, Box, GTObject, MatchAssignment, build_aggregation_groups,
    decode_box, densify_small_anchors, encode_box, generate_anchors, iou, match_anchors,
    occlusion_fraction,
)
from .losses import (
    DiffScalar, LossBatch, LossConfig, agg_loss, cls_loss, com_loss, frc_loss, grad_check,
    occ_loss, reg_loss, rpn_loss, smooth_l1,
)
from .poroi import (
    FeatureMap, OcclusionUnitParams, PartLayout, combine_features, default_part_layout,
    occlusion_unit_forward, poroi_forward, roi_pool, visibility_targets,
)

__version__ = "0.1.0"

__all__ = [
    "SUBSETS", "Detection", "EvalCurve", "SweepResult", "fppi_missrate_curve", "get_subset",
    "match_detections", "mr2", "nms", "nms_sweep", "subset_filter", "AggregationGroups",
    "AnchorSet", "Box", "GTObject", "MatchAssignment", "build_aggregation_groups", "decode_box",
    "densify_small_anchors", "encode_box", "generate_anchors", "iou", "match_anchors",
    "occlusion_fraction", "DiffScalar", "LossBatch", "LossConfig", "agg_loss", "cls_loss",
    "com_loss", "frc_loss", "grad_check", "occ_loss", "reg_loss", "rpn_loss", "smooth_l1",
    "FeatureMap", "OcclusionUnitParams", "PartLayout", "combine_features",
    "default_part_layout", "occlusion_unit_forward", "poroi_forward", "roi_pool",
    "visibility_targets",
]
