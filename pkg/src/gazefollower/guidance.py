"""Person-specific spatial guidance over the patch grid.

A small shared-stem MLP scores each final-layer patch token; logits outside
the target person's head region are masked before the softmax, so the
resulting distribution is supported exactly on the head patches.  A second
linear layer on the same stem predicts per-patch head occurrence, used as a
training-time auxiliary task.
"""

from __future__ import annotations

import torch
from torch import nn

from gazefollower.backbone import PatchGrid
from gazefollower.data.manifest import HeadBox


def head_patch_mask(head: HeadBox, grid: PatchGrid) -> torch.Tensor:
    """Boolean ``[h, w]`` grid of patches whose pixel area intersects the box.

    Any strictly positive overlap qualifies, so small faces still produce a
    non-empty mask; if the box is narrower than every patch boundary the
    patch containing the box center is forced true.
    """
    ys = torch.arange(grid.h, dtype=torch.float64)
    xs = torch.arange(grid.w, dtype=torch.float64)
    y0, y1 = ys / grid.h, (ys + 1) / grid.h
    x0, x1 = xs / grid.w, (xs + 1) / grid.w
    row_hit = (torch.minimum(y1, torch.tensor(head.y_max)) - torch.maximum(y0, torch.tensor(head.y_min))) > 0
    col_hit = (torch.minimum(x1, torch.tensor(head.x_max)) - torch.maximum(x0, torch.tensor(head.x_min))) > 0
    mask = row_hit.unsqueeze(1) & col_hit.unsqueeze(0)
    if not mask.any():
        cx, cy = head.center
        i = min(int(cy * grid.h), grid.h - 1)
        j = min(int(cx * grid.w), grid.w - 1)
        mask[i, j] = True
    return mask


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the trailing (h, w) axes restricted to ``mask``.

    Masked-out positions are exactly zero in the result.  Raises when a
    sample's mask is empty (the distribution would be undefined).
    """
    if logits.shape != mask.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs mask {tuple(mask.shape)}")
    flat_mask = mask.reshape(*mask.shape[:-2], -1)
    if not flat_mask.any(dim=-1).all():
        raise ValueError("empty head mask: guidance distribution undefined")
    flat = logits.reshape(*logits.shape[:-2], -1)
    filled = flat.masked_fill(~flat_mask, float("-inf"))
    return torch.softmax(filled, dim=-1).reshape(logits.shape)


class SpatialGuidance(nn.Module):
    """Two-layer MLP producing the guidance distribution and the auxiliary map.

    The first (stem) layer is shared by both branches; perturbing it moves
    both outputs, which is what lets the head-occurrence task supervise the
    guidance features.
    """

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim // 2
        self.stem = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.guidance_head = nn.Linear(hidden, 1)
        self.aux_head = nn.Linear(hidden, 1)

    def _hidden(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        return self.act(self.stem(patch_tokens))

    def guidance_logits(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        """Per-patch scalar logits ``[B, h*w]`` from tokens ``[B, h*w, C]``."""
        return self.guidance_head(self._hidden(patch_tokens)).squeeze(-1)

    def compute_guidance(
        self, patch_tokens: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """Guidance distribution ``[B, h, w]`` supported on ``mask``."""
        B = patch_tokens.shape[0]
        h, w = mask.shape[-2:]
        logits = self.guidance_logits(patch_tokens).reshape(B, h, w)
        return masked_softmax(logits, mask.expand(B, h, w))

    def aux_head_predict(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        """Per-patch head-occurrence probabilities ``[B, h*w]`` in (0, 1)."""
        return torch.sigmoid(self.aux_head(self._hidden(patch_tokens)).squeeze(-1))

    def forward(
        self, patch_tokens: torch.Tensor, mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (guidance ``[B, h, w]``, aux map ``[B, h, w]``), sharing one stem pass."""
        B = patch_tokens.shape[0]
        h, w = mask.shape[-2:]
        hidden = self._hidden(patch_tokens)
        logits = self.guidance_head(hidden).squeeze(-1).reshape(B, h, w)
        guidance = masked_softmax(logits, mask.expand(B, h, w))
        aux = torch.sigmoid(self.aux_head(hidden).squeeze(-1)).reshape(B, h, w)
        return guidance, aux
