"""3D patch-based CNN-transformer subcortical segmentation pipeline."""

__version__ = "0.1.0"

from .labels import LabelTable
from .model import HybridSegNet3d, ModelConfig
from .patches import plan_patches, segment_volume
from .training import TrainConfig, dice_loss, train
from .volume import Volume, conform, crop_to_content, rescale_intensity, restore_to_full

__all__ = [
    "LabelTable",
    "HybridSegNet3d",
    "ModelConfig",
    "plan_patches",
    "segment_volume",
    "TrainConfig",
    "dice_loss",
    "train",
    "Volume",
    "conform",
    "crop_to_content",
    "rescale_intensity",
    "restore_to_full",
]
