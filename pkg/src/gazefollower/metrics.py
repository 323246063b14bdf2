"""Evaluation metrics: heatmap AUC, gaze distances, watching-outside AP.

AUC scores the predicted heatmap as a per-pixel ranking against a binary grid
marking the annotated gaze pixels; it is invariant to monotone rescaling of
the heatmap.  Distances compare the decoded point against every annotation in
normalized units.  AP scores the watching-outside probabilities against the
outside labels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import average_precision_score, roc_auc_score

EVAL_AUC_SHAPE = (64, 64)


def _resize_bilinear(heatmap: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if heatmap.shape == shape:
        return heatmap.astype(np.float64)
    t = torch.from_numpy(np.ascontiguousarray(heatmap, dtype=np.float64))
    t = F.interpolate(
        t.unsqueeze(0).unsqueeze(0), size=shape, mode="bilinear", align_corners=False
    )
    return t.squeeze(0).squeeze(0).numpy()


def heatmap_auc(
    pred_heatmap: np.ndarray,
    gt_points: list[tuple[float, float]],
    eval_shape: tuple[int, int] = EVAL_AUC_SHAPE,
) -> float:
    """ROC AUC of heatmap values against gaze-pixel labels on ``eval_shape``.

    The heatmap is resized bilinearly to the evaluation grid and each ground
    truth point marks one positive pixel.  Raises if there are no annotations
    or the label grid is single-class (AUC undefined).
    """
    if not gt_points:
        raise ValueError("heatmap AUC needs at least one gaze annotation")
    H, W = eval_shape
    scores = _resize_bilinear(np.asarray(pred_heatmap, dtype=np.float64), eval_shape)
    labels = np.zeros(eval_shape, dtype=np.int64)
    for x, y in gt_points:
        c = min(int(x * W), W - 1)
        r = min(int(y * H), H - 1)
        labels[r, c] = 1
    if labels.all() or not labels.any():
        raise ValueError("label grid is single-class; AUC undefined")
    return float(roc_auc_score(labels.ravel(), scores.ravel()))


def gaze_distances(
    decoded: tuple[float, float], gt_points: list[tuple[float, float]]
) -> tuple[float, float]:
    """(min, mean) Euclidean distance from the decoded point to the annotations."""
    if not gt_points:
        raise ValueError("no gaze annotations to compare against")
    dx, dy = decoded
    dists = [float(np.hypot(dx - x, dy - y)) for x, y in gt_points]
    return min(dists), float(np.mean(dists))


def watching_outside_ap(p_outs, labels_out) -> float:
    """Average precision of p(outside) scores against outside labels."""
    labels = np.asarray(labels_out, dtype=np.int64)
    scores = np.asarray(p_outs, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError("scores and labels must have equal length")
    if labels.sum() == 0:
        raise ValueError("AP undefined without positive (outside) labels")
    return float(average_precision_score(labels, scores))


def format_report(metrics: dict[str, tuple[float, int]]) -> str:
    """Plain-text report, one ``name value sample_count`` line per metric."""
    lines = [f"{name} {value:.6f} {count}" for name, (value, count) in metrics.items()]
    return "\n".join(lines) + "\n"


def write_report(metrics: dict[str, tuple[float, int]], path: str | Path) -> None:
    Path(path).write_text(format_report(metrics), encoding="utf-8")
