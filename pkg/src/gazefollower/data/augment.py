"""Training-time augmentations applied consistently to image, boxes, and gaze.

All geometric transforms operate on normalized [0, 1] coordinates so that the
head box, every other annotated head in the frame, and the gaze point(s) stay
aligned with the pixels.  Every random draw comes from the caller-provided
``numpy`` generator, so (seed, sample index) fully determines the output and
parallel workers stay reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from gazefollower.backbone import PatchGrid
from gazefollower.data.manifest import GazeSample, HeadBox

_MAX_CROP_RETRIES = 10


@dataclass(frozen=True)
class AugmentConfig:
    """Magnitudes for the augmentation chain; zeros disable a transform.

    ``out_size`` (height, width) resizes the result after cropping; when
    ``None`` the input resolution is kept.
    """

    bbox_jitter_frac: float = 0.1
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    crop_scale_min: float = 0.5
    crop_scale_max: float = 1.0
    flip_prob: float = 0.5
    rotation_deg: float = 15.0
    mask_token_prob: float = 0.5
    background_overlap_threshold: float = 0.5
    out_size: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        for name in ("flip_prob", "mask_token_prob", "background_overlap_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ValueError(
                f"crop scale range [{self.crop_scale_min}, {self.crop_scale_max}] invalid"
            )
        for name in ("bbox_jitter_frac", "brightness", "contrast", "saturation",
                     "rotation_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def identity(cls, out_size: tuple[int, int] | None = None) -> "AugmentConfig":
        return cls(
            bbox_jitter_frac=0.0,
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            crop_scale_min=1.0,
            crop_scale_max=1.0,
            flip_prob=0.0,
            rotation_deg=0.0,
            mask_token_prob=0.0,
            out_size=out_size,
        )


def _clamp01(v: float) -> float:
    return min(1.0, max(0.0, v))


def _clamped_box(x0: float, y0: float, x1: float, y1: float) -> HeadBox | None:
    x0, y0, x1, y1 = _clamp01(x0), _clamp01(y0), _clamp01(x1), _clamp01(y1)
    if x0 < x1 and y0 < y1:
        return HeadBox(x0, y0, x1, y1)
    return None


def _jitter_box(box: HeadBox, frac: float, rng: np.random.Generator) -> HeadBox:
    dx0, dy0, dx1, dy1 = rng.uniform(-frac, frac, size=4)
    jittered = _clamped_box(
        box.x_min + dx0 * box.width,
        box.y_min + dy0 * box.height,
        box.x_max + dx1 * box.width,
        box.y_max + dy1 * box.height,
    )
    return jittered if jittered is not None else box


def _resize(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if image.shape[-2:] == size:
        return image
    return F.interpolate(
        image.unsqueeze(0), size=size, mode="bilinear", align_corners=False
    ).squeeze(0)


def _rotate_image(image: torch.Tensor, theta: float) -> torch.Tensor:
    """Rotate image content by ``theta`` radians about its center (zeros fill)."""
    _, H, W = image.shape
    device, dtype = image.device, image.dtype
    ys = torch.arange(H, dtype=dtype, device=device)
    xs = torch.arange(W, dtype=dtype, device=device)
    oy, ox = torch.meshgrid(ys, xs, indexing="ij")
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # output pixel o samples input at R(theta) (o - c) + c
    ix = cos_t * (ox - cx) - sin_t * (oy - cy) + cx
    iy = sin_t * (ox - cx) + cos_t * (oy - cy) + cy
    gx = (ix + 0.5) / W * 2.0 - 1.0
    gy = (iy + 0.5) / H * 2.0 - 1.0
    grid = torch.stack([gx, gy], dim=-1).unsqueeze(0)
    out = F.grid_sample(
        image.unsqueeze(0), grid, mode="bilinear",
        padding_mode="zeros", align_corners=False,
    )
    return out.squeeze(0)


def _rotate_point(
    x: float, y: float, theta: float, width: int, height: int
) -> tuple[float, float]:
    """Where a content point lands after :func:`_rotate_image` with the same theta."""
    px, py = x * width - 0.5, y * height - 0.5
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    cos_t, sin_t = math.cos(-theta), math.sin(-theta)
    nx = cos_t * (px - cx) - sin_t * (py - cy) + cx
    ny = sin_t * (px - cx) + cos_t * (py - cy) + cy
    return (nx + 0.5) / width, (ny + 0.5) / height


def _rotate_box(
    box: HeadBox, theta: float, width: int, height: int
) -> HeadBox | None:
    corners = [
        (box.x_min, box.y_min), (box.x_max, box.y_min),
        (box.x_min, box.y_max), (box.x_max, box.y_max),
    ]
    pts = [_rotate_point(x, y, theta, width, height) for x, y in corners]
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    return _clamped_box(min(xs), min(ys), max(xs), max(ys))


def _color_jitter(
    image: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator
) -> torch.Tensor:
    if cfg.brightness > 0:
        b = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
        image = (image * b).clamp(0.0, 1.0)
    if cfg.contrast > 0:
        c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        mean = image.mean()
        image = ((image - mean) * c + mean).clamp(0.0, 1.0)
    if cfg.saturation > 0:
        s = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
        gray = (0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]).unsqueeze(0)
        image = (gray + (image - gray) * s).clamp(0.0, 1.0)
    return image


def augment(
    sample: GazeSample,
    image: torch.Tensor,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, GazeSample]:
    """Apply the augmentation chain to one sample.

    Order: head-box jitter, random crop (+resize), horizontal flip, rotation,
    color jitter.  A crop or rotation that would lose the target head entirely
    is retried/skipped; when the gaze point leaves the visible frame the
    sample becomes ``inside=False`` for this draw.  With an all-identity
    config the inputs are returned unchanged.
    """
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got {tuple(image.shape)}")
    head = sample.head
    # frame heads keep their true (unjittered) positions: jitter simulates a
    # noisy input box, while occurrence supervision should stay accurate
    others = [b for b in sample.all_heads]
    gaze = list(sample.gaze_points)
    inside = sample.inside

    if cfg.bbox_jitter_frac > 0:
        head = _jitter_box(head, cfg.bbox_jitter_frac, rng)

    # --- random crop -------------------------------------------------------
    _, H, W = image.shape
    crop = None  # (x0, y0, sx, sy) in normalized units
    if cfg.crop_scale_max < 1.0 or cfg.crop_scale_min < 1.0:
        for _ in range(_MAX_CROP_RETRIES):
            s = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
            ch, cw = max(1, round(s * H)), max(1, round(s * W))
            y0 = int(rng.integers(0, H - ch + 1))
            x0 = int(rng.integers(0, W - cw + 1))
            nx0, ny0 = x0 / W, y0 / H
            sx, sy = cw / W, ch / H
            # target head must stay at least partially visible
            if (head.x_max > nx0 and head.x_min < nx0 + sx
                    and head.y_max > ny0 and head.y_min < ny0 + sy):
                crop = (nx0, ny0, sx, sy)
                image = image[:, y0:y0 + ch, x0:x0 + cw]
                break
    if crop is not None:
        nx0, ny0, sx, sy = crop

        def _map(x: float, y: float) -> tuple[float, float]:
            return (x - nx0) / sx, (y - ny0) / sy

        mapped = _clamped_box(*_map(head.x_min, head.y_min), *_map(head.x_max, head.y_max))
        head = mapped if mapped is not None else HeadBox(0.0, 0.0, 1.0, 1.0)
        others = [
            b for b in (
                _clamped_box(*_map(o.x_min, o.y_min), *_map(o.x_max, o.y_max))
                for o in others
            ) if b is not None
        ]
        new_gaze = []
        for gx, gy in gaze:
            mx, my = _map(gx, gy)
            if 0.0 <= mx <= 1.0 and 0.0 <= my <= 1.0:
                new_gaze.append((mx, my))
        gaze = new_gaze
        inside = inside and bool(gaze)

    if cfg.out_size is not None:
        image = _resize(image, cfg.out_size)
    elif crop is not None:
        image = _resize(image, (H, W))

    # --- horizontal flip ---------------------------------------------------
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        image = torch.flip(image, dims=[-1])
        head = HeadBox(1.0 - head.x_max, head.y_min, 1.0 - head.x_min, head.y_max)
        others = [HeadBox(1.0 - b.x_max, b.y_min, 1.0 - b.x_min, b.y_max) for b in others]
        gaze = [(1.0 - x, y) for x, y in gaze]

    # --- rotation -----------------------------------------------------------
    if cfg.rotation_deg > 0:
        theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        _, H2, W2 = image.shape
        rotated_head = _rotate_box(head, theta, W2, H2)
        if theta != 0.0 and rotated_head is not None:
            image = _rotate_image(image, theta)
            head = rotated_head
            others = [
                b for b in (_rotate_box(o, theta, W2, H2) for o in others)
                if b is not None
            ]
            new_gaze = []
            for gx, gy in gaze:
                mx, my = _rotate_point(gx, gy, theta, W2, H2)
                if 0.0 <= mx <= 1.0 and 0.0 <= my <= 1.0:
                    new_gaze.append((mx, my))
            gaze = new_gaze
            inside = inside and bool(gaze)

    image = _color_jitter(image, cfg, rng)

    out = replace(sample, head=head, gaze_points=gaze, inside=inside)
    out.all_heads = others if others else [head]
    return image, out


# ---------------------------------------------------------------------------
# background patch masking
# ---------------------------------------------------------------------------


def _union_interval_length(intervals: list[tuple[float, float]]) -> float:
    total = 0.0
    last_end = -math.inf
    for a, b in sorted(intervals):
        if b <= last_end:
            continue
        total += b - max(a, last_end)
        last_end = b
    return total


def _rect_union_area(rects: list[tuple[float, float, float, float]]) -> float:
    """Exact area of a union of axis-aligned rectangles (x0, y0, x1, y1)."""
    if not rects:
        return 0.0
    xs = sorted({r[0] for r in rects} | {r[2] for r in rects})
    area = 0.0
    for x0, x1 in zip(xs, xs[1:]):
        if x1 <= x0:
            continue
        spans = [(r[1], r[3]) for r in rects if r[0] <= x0 and r[2] >= x1]
        if spans:
            area += (x1 - x0) * _union_interval_length(spans)
    return area


def head_overlap_fractions(
    head_boxes: list[HeadBox], grid: PatchGrid
) -> np.ndarray:
    """Per-patch fraction of patch area covered by the union of head boxes."""
    frac = np.zeros((grid.h, grid.w), dtype=np.float64)
    if not head_boxes:
        return frac
    for i in range(grid.h):
        py0, py1 = i / grid.h, (i + 1) / grid.h
        for j in range(grid.w):
            px0, px1 = j / grid.w, (j + 1) / grid.w
            clipped = []
            for b in head_boxes:
                x0, x1 = max(b.x_min, px0), min(b.x_max, px1)
                y0, y1 = max(b.y_min, py0), min(b.y_max, py1)
                if x1 > x0 and y1 > y0:
                    clipped.append((x0, y0, x1, y1))
            patch_area = (px1 - px0) * (py1 - py0)
            frac[i, j] = _rect_union_area(clipped) / patch_area
    return frac


def mask_background_patches(
    image: torch.Tensor,
    head_boxes: list[HeadBox],
    grid: PatchGrid,
    prob: float,
    rng: np.random.Generator,
    overlap_threshold: float = 0.5,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Independently flag background patches for mask-token replacement.

    A patch is background when its head-overlap fraction is below
    ``overlap_threshold``; each background patch is flagged with probability
    ``prob``.  Pixels are untouched: the returned boolean grid is consumed by
    the backbone, which swaps flagged patches for its mask token at embedding
    time.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob={prob} outside [0, 1]")
    eligible = head_overlap_fractions(head_boxes, grid) < overlap_threshold
    if prob <= 0.0:
        flags = np.zeros((grid.h, grid.w), dtype=bool)
    else:
        draws = rng.random((grid.h, grid.w)) < prob
        flags = eligible & draws
    return image, torch.from_numpy(flags)
