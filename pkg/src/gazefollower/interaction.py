"""Patch-interaction features from captured attention maps.

Attention maps from K blocks x H heads form a stack of patch-to-patch
interaction channels.  Weighting the query axis by a spatial guidance
distribution pools them into person-specific 2D features; the same weighting
over final-layer tokens yields the feature for watching-outside prediction.
"""

from __future__ import annotations

import torch

from gazefollower.backbone import PatchGrid


def assemble_interaction_stack(
    attention: list[torch.Tensor], grid: PatchGrid, renormalize: bool = False
) -> torch.Tensor:
    """Stack captured attention into ``[B, K*H, h, w, h, w]``.

    Each input map is ``[B, H, L, L]`` with the class token at index 0; the
    class row/column is dropped and the patch block is reshaped so axes read
    (channel, query_y, query_x, key_y, key_x).  Channels are ordered
    block-major, then head.  By default the class-token mass is simply
    discarded, preserving relative interaction strengths; ``renormalize``
    rescales each query row back to a distribution over patches.
    """
    n = grid.num_patches
    for a in attention:
        if a.shape[-1] != 1 + n or a.shape[-2] != 1 + n:
            raise ValueError(
                f"attention length {a.shape[-1]} inconsistent with grid "
                f"{grid.h}x{grid.w} (+1 class token)"
            )
    stack = torch.cat([a[:, :, 1:, 1:] for a in attention], dim=1)
    if renormalize:
        stack = stack / stack.sum(dim=-1, keepdim=True).clamp_min(1e-12)
    B, C = stack.shape[:2]
    return stack.reshape(B, C, grid.h, grid.w, grid.h, grid.w)


def aggregate_person_features(
    stack: torch.Tensor, guidance: torch.Tensor
) -> torch.Tensor:
    """Pool the query axes of ``[B, C, h, w, h, w]`` with weights ``[B, h, w]``.

    Returns ``[B, C, h, w]`` where entry (c, ky, kx) is the guidance-weighted
    sum over query positions of the interaction strength toward key (ky, kx).
    """
    return torch.einsum("bcqrkl,bqr->bckl", stack, guidance)


def aggregate_inout_feature(
    token_map: torch.Tensor, guidance: torch.Tensor
) -> torch.Tensor:
    """Guidance-weighted pooling of a ``[B, C, h, w]`` token feature map to ``[B, C]``."""
    return torch.einsum("bchw,bhw->bc", token_map, guidance)


def person_features_from_attention(
    attention: list[torch.Tensor],
    guidance: torch.Tensor,
    grid: PatchGrid,
    renormalize: bool = False,
) -> torch.Tensor:
    """Equivalent of assemble + aggregate without materialising the 4D stack.

    At 37x37 grids the full stack costs hundreds of MB per sample; contracting
    each ``[B, H, hw, hw]`` map against the flattened guidance directly gives
    the same ``[B, K*H, h, w]`` result (equality is covered by tests).
    """
    B = guidance.shape[0]
    flat = guidance.reshape(B, -1)
    pooled = []
    for a in attention:
        patch = a[:, :, 1:, 1:]
        if renormalize:
            patch = patch / patch.sum(dim=-1, keepdim=True).clamp_min(1e-12)
        pooled.append(torch.einsum("bhqk,bq->bhk", patch, flat))
    out = torch.cat(pooled, dim=1)
    return out.reshape(B, -1, grid.h, grid.w)
