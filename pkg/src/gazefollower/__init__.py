"""Gaze-target prediction from ViT self-attention interaction features.

The package predicts where a person in an image is looking, given the image
and the person's head bounding box.  Patch-to-patch self-attention maps from
several transformer blocks are pooled with a learned spatial guidance over the
head region and decoded into a gaze heatmap plus a watching-outside
probability.
"""

__version__ = "0.1.0"

from gazefollower.backbone import PatchGrid, ViTBackbone, ViTConfig
from gazefollower.data.manifest import GazeSample, HeadBox, load_manifest
from gazefollower.model import GazeModel, ModelConfig

__all__ = [
    "GazeModel",
    "GazeSample",
    "HeadBox",
    "ModelConfig",
    "PatchGrid",
    "ViTBackbone",
    "ViTConfig",
    "load_manifest",
]
