"""Camera/LiDAR two-stream segmentation with perception-aware distillation,
built on a small numpy autodiff engine."""
from .dataio import DataError, FormatError, LabelMap, ScanRecord, synth_scene_generate
from .evalkit import ConfusionMatrix, distance_binned_miou, iou_report
from .geometry import (IGNORE, Calibration, PointCloud, ProjectedScan, perspective_project_cloud,
                       spherical_project_cloud)
from .kernels import BACKEND
from .losses import LossConfig, pmf_losses
from .network import NetworkConfig, TSNet, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Calibration", "ConfusionMatrix", "DataError", "FormatError", "IGNORE", "LabelMap",
    "LossConfig", "NetworkConfig", "PointCloud", "ProjectedScan", "ScanRecord", "Tensor", "TSNet",
    "TrainConfig", "backward", "distance_binned_miou", "iou_report", "load_checkpoint", "pmf_losses",
    "perspective_project_cloud", "save_checkpoint", "spherical_project_cloud", "synth_scene_generate",
    "train",
]
