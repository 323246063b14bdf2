"""The three training losses and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weights of the loss terms plus the focal exponent (defaults per recipe)."""

    heatmap: float = 100.0
    inout: float = 1.0
    aux: float = 1.0
    focal_gamma: float = 2.0

    def __post_init__(self) -> None:
        for name in ("heatmap", "inout", "aux", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def heatmap_loss(
    pred: torch.Tensor, gt: torch.Tensor, inside: torch.Tensor | bool
) -> torch.Tensor:
    """Pixel-mean squared error on the gaze heatmap, zeroed for outside samples.

    ``pred``/``gt`` are ``[..., H, W]``; ``inside`` broadcasts over the batch
    dims.  Outside samples carry no gaze ground truth, so they contribute 0
    (they still count in the batch mean).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    per_sample = (pred - gt).pow(2).mean(dim=(-2, -1))
    gate = torch.as_tensor(inside, device=pred.device).to(per_sample.dtype)
    return (per_sample * gate).mean()


def inout_loss(
    p_out: torch.Tensor, label_out: torch.Tensor | bool, gamma: float = 2.0
) -> torch.Tensor:
    """Focal loss on the watching-outside probability.

    With p_t = p_out for outside labels and 1 - p_out otherwise,
    loss = -(1 - p_t)^gamma * log(p_t); gamma = 0 reduces to plain BCE.
    Probabilities are clamped to [eps, 1 - eps] before the log.
    """
    p = torch.as_tensor(p_out)
    label = torch.as_tensor(label_out, device=p.device).to(torch.bool)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_t = torch.where(label, p, 1.0 - p)
    loss = -((1.0 - p_t) ** gamma) * torch.log(p_t)
    return loss.mean()


def aux_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Patch-mean binary cross-entropy between predicted and true head occurrence."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p)).mean()


def total_loss(
    heatmap_term: torch.Tensor,
    inout_term: torch.Tensor,
    aux_term: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    return (
        weights.heatmap * heatmap_term
        + weights.inout * inout_term
        + weights.aux * aux_term
    )
