"""Overlay renderings of the model's intermediate maps for one sample."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from gazefollower.model import GazeModel

OVERLAY_ALPHA = 0.5
_CMAP = colormaps["jet"]


def _to_uint8(image01: torch.Tensor) -> np.ndarray:
    arr = (image01.clamp(0, 1) * 255).byte().permute(1, 2, 0).cpu().numpy()
    return arr


def _overlay(image01: torch.Tensor, heat: np.ndarray) -> Image.Image:
    """Alpha-blend a normalized scalar map over the image with a fixed colormap."""
    _, H, W = image01.shape
    t = torch.from_numpy(np.ascontiguousarray(heat, dtype=np.float32))
    t = F.interpolate(
        t.unsqueeze(0).unsqueeze(0), size=(H, W), mode="bilinear", align_corners=False
    ).squeeze()
    arr = t.numpy()
    span = arr.max() - arr.min()
    if span > 0:
        arr = (arr - arr.min()) / span
    else:
        arr = np.zeros_like(arr)
    colored = (_CMAP(arr)[..., :3] * 255).astype(np.uint8)
    base = _to_uint8(image01).astype(np.float32)
    blended = (1 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * colored.astype(np.float32)
    return Image.fromarray(blended.astype(np.uint8))


def render_prediction_overlays(
    model: GazeModel,
    image01: torch.Tensor,
    normalized_image: torch.Tensor,
    head_box: torch.Tensor,
    out_dir: str | Path,
    stem: str = "sample",
) -> list[Path]:
    """Write the four diagnostic overlays for one sample; returns the paths.

    Outputs: the guidance distribution, the channel-mean interaction map for
    a mid-level capture block and for the last capture block, and the
    predicted gaze heatmap, each blended over the input image.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        out = model(
            normalized_image.unsqueeze(0), head_box.unsqueeze(0),
            return_internals=True,
        )
    guidance = out["guidance"][0].cpu().numpy()
    person = out["person_features"][0].cpu().numpy()  # [K*H, h, w]
    heatmap = out["heatmap"][0].cpu().numpy()

    capture = model.cfg.vit.capture_blocks
    heads = model.cfg.vit.num_heads
    mid_level = max(0, (len(capture) - 1) // 2)
    last_level = len(capture) - 1
    mid = person[mid_level * heads:(mid_level + 1) * heads].mean(axis=0)
    last = person[last_level * heads:(last_level + 1) * heads].mean(axis=0)

    paths = []
    for name, data in (
        ("guidance", guidance),
        (f"interaction_mid_block{capture[mid_level]}", mid),
        (f"interaction_last_block{capture[last_level]}", last),
        ("heatmap", heatmap),
    ):
        path = out_dir / f"{stem}_{name}.png"
        _overlay(image01, data).save(path)
        paths.append(path)
    return paths
