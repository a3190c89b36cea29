"""luskit: the model-agnostic side of a lung-ultrasound feature detector.

Anchor arithmetic, NMS, multi-IoU AP/mAP evaluation, annotation formats,
synthetic scenarios and a rule engine that ranks neonatal lung conditions
from detected features.
"""
from .geometry import BoundingBox, Detection, FeatureClass, area, aspect_ratio, exact_aspect_ratio, iou, nms
from .anchors import (
    AnchorConfig,
    AnchorGrid,
    BoxOffsets,
    anchors_per_position,
    decode_offsets,
    encode_offsets,
    generate_anchors,
    label_anchors,
    potential_anchor_count,
    preset,
)
from .annotations import (
    AnnotationError,
    ConditionClass,
    Dataset,
    FrameAnnotations,
    VideoMeta,
    dataset_stats,
    parse_ground_truth,
    parse_predictions,
    serialize_ground_truth,
    serialize_predictions,
    split_dataset,
)
from .evaluation import (
    APReport,
    EvalMode,
    average_precision,
    evaluate,
    match_frame,
    mean_average_precision,
    pr_curve,
    precision_recall,
)
from .diagnosis import (
    CalibrationConfig,
    ScanFeatureSummary,
    aggregate_scan,
    annotate_frame_report,
    classify_bline_spacing,
    classify_pleura_thickness,
    load_rules,
    rank_conditions,
)
from .synthetic import PerturbationConfig, ScenarioProfile, generate_ground_truth, perturb

__version__ = "0.1.0"
