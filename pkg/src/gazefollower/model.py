"""The assembled gaze-target network.

Pipeline per sample: the ViT encodes the (optionally patch-masked) image and
exports attention maps from the capture blocks; a guidance distribution over
the target person's head patches pools those maps into person-specific
interaction features; the heatmap head decodes them to gaze logits while the
in-out head scores the guidance-pooled final tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from gazefollower.backbone import BackboneOutput, PatchGrid, ViTBackbone, ViTConfig
from gazefollower.data.manifest import HeadBox
from gazefollower.guidance import SpatialGuidance, head_patch_mask
from gazefollower.heads import HeatmapHead, InOutHead
from gazefollower.interaction import (
    aggregate_inout_feature,
    person_features_from_attention,
)


@dataclass(frozen=True)
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    # None -> embed_dim // 2
    guidance_hidden: int | None = None
    head_widths: tuple[int, ...] = (64, 32, 16)
    # rescale attention rows to sum to 1 after dropping the class share
    renormalize_attention: bool = False

    @property
    def interaction_channels(self) -> int:
        return self.vit.num_capture * self.vit.num_heads


class GazeModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, require_pretrained: bool = False):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        dim = cfg.vit.embed_dim
        self.backbone = ViTBackbone(cfg.vit, require_pretrained=require_pretrained)
        self.guidance = SpatialGuidance(dim, cfg.guidance_hidden)
        self.heatmap_head = HeatmapHead(cfg.interaction_channels, cfg.head_widths)
        self.inout_head = InOutHead(dim)

    def head_masks(self, head_boxes: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
        """Boolean ``[B, h, w]`` masks from normalized ``[B, 4]`` head boxes."""
        masks = [
            head_patch_mask(HeadBox(*(float(v) for v in b)), grid)
            for b in head_boxes
        ]
        return torch.stack(masks).to(head_boxes.device)

    def forward(
        self,
        image: torch.Tensor,
        head_box: torch.Tensor,
        patch_mask: torch.Tensor | None = None,
        return_internals: bool = False,
    ) -> dict[str, torch.Tensor]:
        """Predict gaze for a batch.

        ``image``: ``[B, 3, H, W]`` normalized input; ``head_box``: ``[B, 4]``
        normalized (x_min, y_min, x_max, y_max); ``patch_mask``: optional
        boolean ``[B, h, w]`` of patches to replace with the mask token.

        Returns ``heatmap`` logits ``[B, 8h, 8w]``, ``p_out`` ``[B]``,
        ``guidance`` ``[B, h, w]``, ``aux_map`` ``[B, h, w]`` and
        ``head_mask``; with ``return_internals`` also the raw attention maps
        and pooled interaction features.
        """
        out: BackboneOutput = self.backbone(image, patch_mask)
        grid = out.grid
        B = image.shape[0]
        patch_tokens = out.final_tokens[:, 1:, :]
        masks = self.head_masks(head_box, grid)
        guidance, aux_map = self.guidance(patch_tokens, masks)
        person_feats = person_features_from_attention(
            out.attention, guidance, grid,
            renormalize=self.cfg.renormalize_attention,
        )
        token_map = (
            patch_tokens.transpose(1, 2).reshape(B, -1, grid.h, grid.w)
        )
        inout_feat = aggregate_inout_feature(token_map, guidance)
        result = {
            "heatmap": self.heatmap_head(person_feats),
            "p_out": self.inout_head(inout_feat),
            "guidance": guidance,
            "aux_map": aux_map,
            "head_mask": masks,
        }
        if return_internals:
            result["attention"] = out.attention
            result["person_features"] = person_feats
            result["final_tokens"] = out.final_tokens
        return result

    # ------------------------------------------------------------------
    # parameter accounting
    # ------------------------------------------------------------------

    def decoder_modules(self) -> dict[str, nn.Module]:
        """Everything outside the encoder: guidance MLP plus both heads."""
        return {
            "guidance": self.guidance,
            "heatmap_head": self.heatmap_head,
            "inout_head": self.inout_head,
        }

    def parameter_counts(self) -> dict[str, float]:
        total = sum(p.numel() for p in self.parameters())
        backbone = sum(p.numel() for p in self.backbone.parameters())
        decoder = sum(
            p.numel() for m in self.decoder_modules().values() for p in m.parameters()
        )
        return {
            "total": total,
            "backbone": backbone,
            "decoder": decoder,
            "decoder_fraction": decoder / total,
        }
