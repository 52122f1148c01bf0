"""Models package"""
from .network import BackboneConfig, ModelBundle, add_task, forward, param_partition
from .sharing import AdaptiveLayer, SharingReport, sharing_report
from .geometry import CameraIntrinsics, Pose, RansacConfig, ransac_pnp, pose_from_prediction
from .losses import PoseError, pose_error, accuracy_5cm5deg, median_errors
from .config import ExperimentConfig, SceneConfig, OptimizerConfig
from .checkpoint import CheckpointManager

__all__ = ["BackboneConfig", "ModelBundle", "add_task", "forward", "param_partition", "AdaptiveLayer",
           "SharingReport", "sharing_report", "CameraIntrinsics", "Pose", "RansacConfig", "ransac_pnp",
           "pose_from_prediction", "PoseError", "pose_error", "accuracy_5cm5deg", "median_errors",
           "ExperimentConfig", "SceneConfig", "OptimizerConfig", "CheckpointManager"]
