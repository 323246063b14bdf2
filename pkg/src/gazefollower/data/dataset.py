"""Manifest-backed dataset producing model inputs and training targets."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset

from gazefollower.backbone import PatchGrid
from gazefollower.codec import encode_gaze_heatmap, head_gt_map
from gazefollower.data.augment import AugmentConfig, augment, mask_background_patches
from gazefollower.data.manifest import GazeSample

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def load_image(path: str | Path) -> torch.Tensor:
    """Read an image file as a float ``[3, H, W]`` tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def normalize_image(image: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(IMAGENET_MEAN, dtype=image.dtype).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=image.dtype).view(3, 1, 1)
    return (image - mean) / std


class GazeDataset(Dataset):
    """Per-sample pipeline: load, augment (train), mask, encode targets.

    Randomness is drawn from a generator seeded with (seed, epoch, index), so
    two runs with equal seeds produce identical streams and workers never
    share state.  Call :meth:`set_epoch` between epochs and
    :meth:`set_resolution` for the late-stage resolution switch.
    """

    def __init__(
        self,
        samples: list[GazeSample],
        images_root: str | Path,
        resolution: int,
        patch_size: int = 14,
        train: bool = True,
        augment_cfg: AugmentConfig | None = None,
        seed: int = 0,
        upscale: int = 8,
    ):
        if resolution % patch_size != 0:
            raise ValueError(f"resolution {resolution} not divisible by patch {patch_size}")
        self.samples = samples
        self.images_root = Path(images_root)
        self.patch_size = patch_size
        self.train = train
        self.seed = seed
        self.epoch = 0
        self.upscale = upscale
        self.resolution = resolution
        base = augment_cfg if augment_cfg is not None else AugmentConfig()
        self._augment_base = base
        self.set_resolution(resolution)

    def set_resolution(self, resolution: int) -> None:
        if resolution % self.patch_size != 0:
            raise ValueError(f"resolution {resolution} not divisible by patch {self.patch_size}")
        self.resolution = resolution
        side = resolution // self.patch_size
        self.grid = PatchGrid(side, side, self.patch_size)
        self.augment_cfg = replace(
            self._augment_base, out_size=(resolution, resolution)
        )

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> dict:
        sample = self.samples[index]
        image = load_image(self.images_root / sample.image_ref)
        rng = np.random.default_rng([self.seed, self.epoch, index])
        if self.train:
            image, sample = augment(sample, image, self.augment_cfg, rng)
        else:
            image = F.interpolate(
                image.unsqueeze(0),
                size=(self.resolution, self.resolution),
                mode="bilinear",
                align_corners=False,
            ).squeeze(0)
        mask_prob = self.augment_cfg.mask_token_prob if self.train else 0.0
        image, patch_mask = mask_background_patches(
            image,
            sample.all_heads,
            self.grid,
            mask_prob,
            rng,
            overlap_threshold=self.augment_cfg.background_overlap_threshold,
        )

        out_h = self.grid.h * self.upscale
        out_w = self.grid.w * self.upscale
        if sample.inside and sample.gaze_points:
            heatmap = encode_gaze_heatmap(sample.gaze_points[0], (out_h, out_w))
        else:
            heatmap = np.zeros((out_h, out_w), dtype=np.float64)
        aux = head_gt_map(sample.all_heads, self.grid)

        return {
            "image": normalize_image(image),
            "head_box": torch.tensor(sample.head.to_list(), dtype=torch.float32),
            "patch_mask": patch_mask,
            "heatmap_gt": torch.from_numpy(heatmap).to(torch.float32),
            "aux_gt": torch.from_numpy(aux).to(torch.float32),
            "inside": bool(sample.inside),
            "gaze_points": list(sample.gaze_points),
            "index": index,
        }


def collate_samples(batch: list[dict]) -> dict:
    """Stack tensor fields; keep ragged gaze annotations as lists."""
    return {
        "image": torch.stack([b["image"] for b in batch]),
        "head_box": torch.stack([b["head_box"] for b in batch]),
        "patch_mask": torch.stack([b["patch_mask"] for b in batch]),
        "heatmap_gt": torch.stack([b["heatmap_gt"] for b in batch]),
        "aux_gt": torch.stack([b["aux_gt"] for b in batch]),
        "inside": torch.tensor([b["inside"] for b in batch], dtype=torch.bool),
        "gaze_points": [b["gaze_points"] for b in batch],
        "index": torch.tensor([b["index"] for b in batch], dtype=torch.long),
    }
