"""Sub-pixel gaze heatmap encoding and decoding.

Ground-truth heatmaps are Gaussians evaluated at the *continuous* target
location, never rounded to a pixel, so the encoding carries no quantization
bias.  Decoding recovers a sub-pixel location with a second-order correction
on the log of the (smoothed) heatmap: for a Gaussian the log-surface is an
exact quadratic, so a single Newton step from the argmax lands on the true
center.

Pixel convention: pixel (r, c) samples the continuous point
(x, y) = (c / W, r / H); the normalized target (x, y) therefore sits at pixel
coordinates (x * W, y * H).
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from gazefollower.backbone import PatchGrid
from gazefollower.data.manifest import HeadBox

_LOG_FLOOR = 1e-10
_DET_FLOOR = 1e-12
_TRUNCATE = 4.0  # blur kernel radius in sigmas


class DegenerateHeatmapError(ValueError):
    """Heatmap carries no location information (constant everywhere)."""


def default_sigma(out_shape: tuple[int, int]) -> float:
    """Gaussian width used for ground truth: 3 px at 64x64, scaled with height."""
    return 3.0 * out_shape[0] / 64.0


def encode_gaze_heatmap(
    target: tuple[float, float],
    out_shape: tuple[int, int],
    sigma: float | None = None,
) -> np.ndarray:
    """Gaussian heatmap with its peak at the continuous target location.

    ``target`` is (x, y) in [0, 1]^2; ``out_shape`` is (H, W).  The value at
    pixel (r, c) is exp(-((c - x*W)^2 + (r - y*H)^2) / (2 sigma^2)), so a
    target exactly on a pixel center produces the value 1.0 there and targets
    differing by sub-pixel offsets produce distinct maps.
    """
    x, y = target
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise ValueError(f"target ({x}, {y}) outside [0, 1]^2")
    H, W = out_shape
    if sigma is None:
        sigma = default_sigma(out_shape)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cx, cy = x * W, y * H
    cols = np.arange(W, dtype=np.float64)
    rows = np.arange(H, dtype=np.float64)
    d2 = (cols[None, :] - cx) ** 2 + (rows[:, None] - cy) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def decode_argmax(heatmap: np.ndarray) -> tuple[float, float]:
    """Quantized baseline: normalized coordinates of the argmax pixel.

    Ties break row-major to the lowest flat index.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    H, W = hm.shape
    r, c = divmod(int(np.argmax(hm)), W)
    return c / W, r / H


def decode_gaze_point(
    heatmap: np.ndarray, sigma: float | None = None
) -> tuple[float, float]:
    """Sub-pixel gaze location from a predicted heatmap.

    The map is Gaussian-smoothed (same sigma as encoding by default), clamped
    to a positive floor, and log-taken; the argmax pixel (row-major
    tie-break) is refined by the Newton step mu = m - Hess^-1 grad using
    central differences of the log-map.

    Because the blur's zero padding bends the log-surface near the borders,
    the expansion point is pushed at least one blur-truncation radius inside
    the grid; for a Gaussian blob the log-surface is one global quadratic, so
    the step from there still lands on the true center.  The corrected
    location is kept within 1.5 px of the argmax (the true peak of any
    decodable blob lies inside the argmax pixel), a singular Hessian falls
    back to the argmax pixel's center, and the result is clamped into the
    grid and returned normalized.

    Raises :class:`DegenerateHeatmapError` for a constant map.
    """
    hm = np.asarray(heatmap, dtype=np.float64)
    if hm.ndim != 2:
        raise ValueError(f"expected a 2D heatmap, got shape {hm.shape}")
    if not np.isfinite(hm).all():
        raise ValueError("heatmap contains non-finite values")
    if hm.max() == hm.min():
        raise DegenerateHeatmapError("constant heatmap cannot be decoded")
    H, W = hm.shape
    if sigma is None:
        sigma = default_sigma((H, W))

    smooth = gaussian_filter(hm, sigma=sigma, mode="constant", truncate=_TRUNCATE)
    logp = np.log(np.maximum(smooth, _LOG_FLOOR))

    r, c = divmod(int(np.argmax(hm)), W)
    blur_radius = int(np.ceil(_TRUNCATE * sigma))
    margin = max(1, min(blur_radius, (H - 2) // 2, (W - 2) // 2))
    rr = min(max(r, margin), H - 1 - margin)
    cc = min(max(c, margin), W - 1 - margin)

    dx = (logp[rr, cc + 1] - logp[rr, cc - 1]) / 2.0
    dy = (logp[rr + 1, cc] - logp[rr - 1, cc]) / 2.0
    dxx = logp[rr, cc + 1] - 2.0 * logp[rr, cc] + logp[rr, cc - 1]
    dyy = logp[rr + 1, cc] - 2.0 * logp[rr, cc] + logp[rr - 1, cc]
    dxy = (
        logp[rr + 1, cc + 1] - logp[rr + 1, cc - 1]
        - logp[rr - 1, cc + 1] + logp[rr - 1, cc - 1]
    ) / 4.0

    det = dxx * dyy - dxy * dxy
    if abs(det) < _DET_FLOOR:
        mx, my = float(c), float(r)
    else:
        ox = -(dyy * dx - dxy * dy) / det
        oy = -(dxx * dy - dxy * dx) / det
        mx = float(np.clip(cc + ox, c - 1.5, c + 1.5))
        my = float(np.clip(rr + oy, r - 1.5, r + 1.5))

    mx = float(np.clip(mx, 0.0, W - 1))
    my = float(np.clip(my, 0.0, H - 1))
    return mx / W, my / H


def head_gt_map(
    head_boxes: list[HeadBox],
    grid: PatchGrid,
    sigma_patches: float | None = None,
) -> np.ndarray:
    """Ground truth for the head-occurrence task: max of per-box Gaussians.

    Each blob is centered at the box center in patch coordinates with
    sigma = box diagonal / 4 in patch units (override with ``sigma_patches``);
    blobs combine by element-wise maximum so values stay valid probabilities.
    No boxes yields an all-zero map.
    """
    out = np.zeros((grid.h, grid.w), dtype=np.float64)
    if not head_boxes:
        return out
    ys = np.arange(grid.h, dtype=np.float64) + 0.5
    xs = np.arange(grid.w, dtype=np.float64) + 0.5
    for box in head_boxes:
        bx, by = box.center
        cx, cy = bx * grid.w, by * grid.h
        if sigma_patches is not None:
            sigma = sigma_patches
        else:
            dw, dh = box.width * grid.w, box.height * grid.h
            sigma = float(np.hypot(dw, dh)) / 4.0
        if sigma <= 0:
            continue
        d2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
        np.maximum(out, np.exp(-d2 / (2.0 * sigma * sigma)), out=out)
    return out
