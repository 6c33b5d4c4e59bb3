"""poselab: desk-scale lab for keypoint-subset domain transfer in pose estimation."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .datasets import Dataset, Sample, generate_synthetic, load_mpii, split_train_val
from .evaluation import MetricReport, MetricSpec, evaluate_model, pck, pckh
from .hourglass import HourglassArch, StackedHourglassNet, build, parameter_count, replace_head
from .keypoints import (
    JointId,
    JointSubsetSplit,
    PoseAnnotation,
    builtin_split,
    decode_heatmaps,
    render_heatmaps,
    transform_pose,
)
from .storage import load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .training import EarlyStopper, PlateauScheduler, TrainingConfig, augment, run_training
from .transfer import TransferMode, assemble, parity_check, train_stage1

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad",
    "Dataset", "Sample", "generate_synthetic", "load_mpii", "split_train_val",
    "MetricReport", "MetricSpec", "evaluate_model", "pck", "pckh",
    "HourglassArch", "StackedHourglassNet", "build", "parameter_count", "replace_head",
    "JointId", "JointSubsetSplit", "PoseAnnotation", "builtin_split",
    "decode_heatmaps", "render_heatmaps", "transform_pose",
    "load_checkpoint", "load_dataset", "save_checkpoint", "save_dataset",
    "EarlyStopper", "PlateauScheduler", "TrainingConfig", "augment", "run_training",
    "TransferMode", "assemble", "parity_check", "train_stage1",
]
