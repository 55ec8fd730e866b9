"""Truncation-aware pose regression on a synthetic articulated world."""

from .kinematics import (
    IN_IMAGE,
    JointId,
    KeypointSet,
    OUT_OF_IMAGE,
    PoseParams,
    UNANNOTATED,
    forward_kinematics,
    head_segment_length,
    surface_points,
)
from .synth import DatasetPool, Frame, GRID_SIZE, generate_pools, render, sample_pose
from .cropper import (
    CropCategory,
    CropSpec,
    apply_crop,
    build_matched_test_crops,
    resolve_crop,
    sample_category,
)
from .model import LossConfig, Regressor, backward, loss_l1, loss_l2, predict, train
from .selftrain import (
    ConfidenceReport,
    RoundState,
    agreement_confidence,
    jitter_confidence,
    jitter_family,
    promote,
    quantile_threshold,
    run_self_training,
)
from .evaluate import (
    AnnotationSet,
    EvalReport,
    aggregate_annotations,
    compare_methods,
    pck_frame,
    pck_pool,
    visibility_stats,
)
from .config import RunConfig

__version__ = "0.1.0"
