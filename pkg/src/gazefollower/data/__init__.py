from gazefollower.data.augment import AugmentConfig, augment, mask_background_patches
from gazefollower.data.manifest import (
    GazeSample,
    HeadBox,
    ManifestError,
    load_manifest,
    save_manifest,
)

__all__ = [
    "AugmentConfig",
    "GazeSample",
    "HeadBox",
    "ManifestError",
    "augment",
    "load_manifest",
    "mask_background_patches",
    "save_manifest",
]
