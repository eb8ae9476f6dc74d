"""Prototype-based segmentation decoder with an efficiency benchmark harness."""

from .config import ModelConfig
from .model import MaskPrediction, SegModel, panoptic_inference, semantic_inference
from .tensor import Tensor

__all__ = ["ModelConfig", "MaskPrediction", "SegModel", "Tensor",
           "panoptic_inference", "semantic_inference"]

__version__ = "0.1.0"
