"""Clustering mask transformer decoder for panoptic segmentation, on a numpy autodiff core."""

from ._kernels import backend
from .cmt import VARIANTS, DecoderConfig, DecoderState, cmt_layer
from .data import SceneConfig, generate_scene, read_dataset, write_dataset
from .losses import PanopticTarget, hungarian
from .model import ModelConfig, TrainConfig, forward, forward_rfn, train
from .panoptic import PanopticMap, Prediction, panoptic_quality
from .tensor import DenseArray

__version__ = "0.1.0"

__all__ = [
    "backend",
    "VARIANTS",
    "DecoderConfig",
    "DecoderState",
    "cmt_layer",
    "SceneConfig",
    "generate_scene",
    "read_dataset",
    "write_dataset",
    "PanopticTarget",
    "hungarian",
    "ModelConfig",
    "TrainConfig",
    "forward",
    "forward_rfn",
    "train",
    "PanopticMap",
    "Prediction",
    "panoptic_quality",
    "DenseArray",
]
