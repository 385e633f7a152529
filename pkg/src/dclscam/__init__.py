"""Learnable-spacing convolutions, Grad-CAM variants and heatmap alignment scoring."""

from .cam import Heatmap, gradcam, overlay, threshold_gradcam
from .dcls import DclsKernelSpec, clamp_positions, construct_kernel, dcls_conv
from .evaluate import AlignmentReport, emit_report, score_model, spearman
from .tensor import Tensor, backward, finite_diff_check
from .zoo import Model, TrainConfig, build, load_checkpoint, save_checkpoint, top1, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentReport",
    "DclsKernelSpec",
    "Heatmap",
    "Model",
    "Tensor",
    "TrainConfig",
    "backward",
    "build",
    "clamp_positions",
    "construct_kernel",
    "dcls_conv",
    "emit_report",
    "finite_diff_check",
    "gradcam",
    "load_checkpoint",
    "overlay",
    "save_checkpoint",
    "score_model",
    "spearman",
    "threshold_gradcam",
    "top1",
    "train",
]
