"""Egocentric full-body pose estimation from a head-mounted fisheye camera.

Two-stage pipeline built from scratch on numpy: motion-history plus
body-shape features feed a fused regressor for body keypoints and head
orientation; a volumetric second stage refines the keypoints.
"""

__version__ = "0.1.0"

from .camera import (CameraPose, FisheyeIntrinsics, HeadPose,
                     HeightCalibration, attach_rig, backproject,
                     calibrate_height, head_to_camera, project)
from .config import NetConfig, TrainConfig, load_config, parse_settings
from .dataset import (dataset_digest, load_dataset, stack_sequences,
                      write_dataset)
from .estimators import (ShapeNetSegmenter, Stage1PoseEstimator,
                         Stage2Refiner)
from .evaluate import (EvalReport, SequenceStats, baseline_pose,
                       build_report, facing_yaw, head_angle_error,
                       keypoint_error, reposition_global)
from .models import ShapeNet, Stage1Net, Stage2Net, sigmoid_bce_loss
from .exceptions import (ConfigError, DataError, EgospanError,
                         NumericalError, ParseError)
from .skeleton import (KEYPOINT_NAMES, NUM_KEYPOINTS, SYMMETRIC_BONE_PAIRS,
                       SimilarityTransform, extract_keypoints, normalize_pose,
                       parse_bvh)

__all__ = [
    "CameraPose", "FisheyeIntrinsics", "HeadPose", "HeightCalibration",
    "attach_rig", "backproject", "calibrate_height", "head_to_camera",
    "project", "ConfigError", "DataError", "EgospanError", "NumericalError",
    "ParseError", "KEYPOINT_NAMES", "NUM_KEYPOINTS", "SYMMETRIC_BONE_PAIRS",
    "SimilarityTransform", "extract_keypoints", "normalize_pose", "parse_bvh",
    "EvalReport", "SequenceStats", "baseline_pose", "build_report",
    "facing_yaw", "head_angle_error", "keypoint_error", "reposition_global",
    "NetConfig", "TrainConfig", "load_config", "parse_settings",
    "ShapeNet", "Stage1Net", "Stage2Net", "sigmoid_bce_loss",
    "ShapeNetSegmenter", "Stage1PoseEstimator", "Stage2Refiner",
    "dataset_digest", "load_dataset", "stack_sequences", "write_dataset",
    "__version__",
]
