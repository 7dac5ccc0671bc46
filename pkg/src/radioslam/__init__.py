"""Collaborative pose-graph SLAM over pedestrian odometry and Wi-Fi fingerprints."""

from .core import Fingerprint, NodeId, Pose2, Trace, Transform2
from .pipeline import RunConfig, evaluate, run_slam, sweep, train_model

__all__ = [
    "Fingerprint",
    "NodeId",
    "Pose2",
    "RunConfig",
    "Trace",
    "Transform2",
    "evaluate",
    "run_slam",
    "sweep",
    "train_model",
]
__version__ = "0.1.0"
