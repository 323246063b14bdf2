"""ViT-S encoder that exports per-block attention maps alongside token features.

The backbone is a plain pre-norm vision transformer (12 blocks, 6 heads,
384 channels, patch 14 by default) compatible with DINOv2-style ViT-S/14
checkpoints: parameter names and shapes follow that family, including the
learned mask token and LayerScale.  Attention maps from a configurable set of
blocks are materialised post-softmax and returned together with the
final-layer tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


class WeightsNotLoadedError(RuntimeError):
    """Forward pass requested before weights were loaded."""


class CheckpointShapeError(RuntimeError):
    """Checkpoint tensors do not fit the model topology."""


@dataclass(frozen=True)
class PatchGrid:
    """Patch layout of one input resolution: ``h`` x ``w`` patches of side ``patch_size`` px."""

    h: int
    w: int
    patch_size: int

    def __post_init__(self) -> None:
        if self.h <= 0 or self.w <= 0 or self.patch_size <= 0:
            raise ValueError(f"invalid patch grid {self}")

    @classmethod
    def for_image(cls, height: int, width: int, patch_size: int) -> "PatchGrid":
        if height % patch_size != 0 or width % patch_size != 0:
            raise ValueError(
                f"image size {height}x{width} not divisible by patch size {patch_size}"
            )
        return cls(height // patch_size, width // patch_size, patch_size)

    @property
    def num_patches(self) -> int:
        return self.h * self.w


@dataclass(frozen=True)
class ViTConfig:
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    patch_size: int = 14
    mlp_ratio: float = 4.0
    # Side of the square grid the stored positional table corresponds to.
    # 37 matches DINOv2 ViT-S/14 checkpoints (518 px pre-training resolution).
    pos_grid: int = 37
    # 1-indexed blocks whose attention maps are exported.
    capture_blocks: tuple[int, ...] = (3, 6, 9, 12)

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        for b in self.capture_blocks:
            if not 1 <= b <= self.depth:
                raise ValueError(f"capture block {b} outside [1, {self.depth}]")

    @property
    def num_capture(self) -> int:
        return len(self.capture_blocks)


@dataclass
class BackboneOutput:
    """Attention maps from the capture blocks plus final-layer tokens.

    ``attention``: one ``[B, H, L, L]`` tensor per capture block, post-softmax.
    ``final_tokens``: ``[B, L, C]`` after the last block and final norm, with
    the class token at index 0 followed by patch tokens in row-major order.
    """

    attention: list[torch.Tensor]
    final_tokens: torch.Tensor
    grid: PatchGrid


@dataclass
class LoadReport:
    unexpected: list[str] = field(default_factory=list)
    resized: list[str] = field(default_factory=list)


class Attention(nn.Module):
    """Multi-head self-attention with an explicit attention-map export path.

    The default path uses the fused scaled-dot-product kernel.  When
    ``need_attn`` is set, the map ``softmax(q k^T / sqrt(d_head))`` is
    materialised and returned; both paths produce the same output tokens.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(
        self, x: torch.Tensor, need_attn: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        B, L, C = x.shape
        qkv = (
            self.qkv(x)
            .reshape(B, L, 3, self.num_heads, self.head_dim)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        if need_attn:
            attn = (q @ k.transpose(-2, -1)) * self.scale
            attn = attn.softmax(dim=-1)
            out = attn @ v
        else:
            attn = None
            out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(B, L, C)
        return self.proj(out), attn


class LayerScale(nn.Module):
    def __init__(self, dim: int, init_value: float = 1.0):
        super().__init__()
        self.gamma = nn.Parameter(init_value * torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gamma


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.ls1 = LayerScale(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = LayerScale(dim)

    def forward(
        self, x: torch.Tensor, need_attn: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        y, attn = self.attn(self.norm1(x), need_attn=need_attn)
        x = x + self.ls1(y)
        x = x + self.ls2(self.mlp(self.norm2(x)))
        return x, attn


class PatchEmbed(nn.Module):
    def __init__(self, patch_size: int, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


class ViTBackbone(nn.Module):
    """Plain ViT encoder with attention export and mask-token support.

    Construct with ``require_pretrained=True`` to forbid forward passes until
    :meth:`load_pretrained` succeeds; the default random initialisation is
    immediately usable (e.g. for from-scratch smoke training).
    """

    def __init__(self, cfg: ViTConfig | None = None, require_pretrained: bool = False):
        super().__init__()
        self.cfg = cfg = cfg or ViTConfig()
        dim = cfg.embed_dim
        self.patch_embed = PatchEmbed(cfg.patch_size, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.mask_token = nn.Parameter(torch.zeros(1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.pos_grid**2, dim))
        self.blocks = nn.ModuleList(
            Block(dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(dim)
        self._init_weights()
        self._weights_ready = not require_pretrained

    def _init_weights(self) -> None:
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    # ------------------------------------------------------------------
    # positional table
    # ------------------------------------------------------------------

    def _pos_embed_for(self, grid: PatchGrid) -> torch.Tensor:
        """Positional table for ``grid``, bicubic-resampled when it differs
        from the stored grid."""
        src = self.cfg.pos_grid
        if grid.h == src and grid.w == src:
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:]
        patch_pos = resize_pos_table(patch_pos, src, src, grid.h, grid.w)
        return torch.cat([cls_pos, patch_pos], dim=1)

    # ------------------------------------------------------------------
    # core ops
    # ------------------------------------------------------------------

    def patchify(
        self, image: torch.Tensor, mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, PatchGrid]:
        """Embed an image batch into the token sequence ``[B, 1 + h*w, C]``.

        ``mask`` is an optional boolean ``[B, h, w]`` (or ``[h, w]``) grid;
        flagged patches are replaced by the learned mask token before the
        positional table is added.
        """
        if image.dim() != 4:
            raise ValueError(f"expected [B, 3, H, W] image, got {tuple(image.shape)}")
        B, _, H, W = image.shape
        grid = PatchGrid.for_image(H, W, self.cfg.patch_size)
        x = self.patch_embed(image)  # [B, C, h, w]
        x = x.flatten(2).transpose(1, 2)  # [B, h*w, C]
        if mask is not None:
            if mask.dim() == 2:
                mask = mask.unsqueeze(0).expand(B, -1, -1)
            if mask.shape[-2:] != (grid.h, grid.w):
                raise ValueError(
                    f"mask shape {tuple(mask.shape[-2:])} does not match grid "
                    f"{grid.h}x{grid.w}"
                )
            flat = mask.reshape(B, -1, 1)
            x = torch.where(flat, self.mask_token.to(x.dtype).expand_as(x), x)
        cls = self.cls_token.expand(B, -1, -1)
        x = torch.cat([cls, x], dim=1)
        x = x + self._pos_embed_for(grid)
        return x, grid

    def forward(
        self, image: torch.Tensor, mask: torch.Tensor | None = None
    ) -> BackboneOutput:
        """Run all blocks, recording attention at the capture blocks."""
        if not self._weights_ready:
            raise WeightsNotLoadedError(
                "backbone constructed with require_pretrained=True; call "
                "load_pretrained() before forward()"
            )
        x, grid = self.patchify(image, mask)
        capture = set(self.cfg.capture_blocks)
        attention: list[torch.Tensor] = []
        for i, blk in enumerate(self.blocks, start=1):
            x, attn = blk(x, need_attn=i in capture)
            if i in capture:
                attention.append(attn)
        x = self.norm(x)
        return BackboneOutput(attention=attention, final_tokens=x, grid=grid)

    # ------------------------------------------------------------------
    # checkpoint loading
    # ------------------------------------------------------------------

    def load_pretrained(self, source) -> LoadReport:
        """Load a name->tensor checkpoint into the backbone.

        Tensor names follow this module's ``state_dict()`` (DINOv2 ViT
        naming).  A ``pos_embed`` stored for a different square grid is
        bicubic-resampled to this model's grid.  Any other shape mismatch or
        a missing backbone tensor raises :class:`CheckpointShapeError` that
        lists the offending names; extra tensors (e.g. register tokens) are
        ignored and reported.
        """
        if isinstance(source, dict):
            state = source
        else:
            state = torch.load(source, map_location="cpu", weights_only=True)
        own = self.state_dict()
        report = LoadReport()
        mismatched: list[str] = []
        accepted: dict[str, torch.Tensor] = {}
        for name, tensor in state.items():
            if name not in own:
                report.unexpected.append(name)
                continue
            want = own[name].shape
            if tensor.shape == want:
                accepted[name] = tensor
            elif name == "pos_embed" and tensor.dim() == 3 and tensor.shape[2] == want[2]:
                src_n = tensor.shape[1] - 1
                src_g = int(round(src_n**0.5))
                if src_g * src_g != src_n:
                    mismatched.append(
                        f"pos_embed: {tuple(tensor.shape)} is not a square grid"
                    )
                    continue
                patch_pos = resize_pos_table(
                    tensor[:, 1:], src_g, src_g, self.cfg.pos_grid, self.cfg.pos_grid
                )
                accepted[name] = torch.cat([tensor[:, :1], patch_pos], dim=1)
                report.resized.append(name)
            else:
                mismatched.append(
                    f"{name}: checkpoint {tuple(tensor.shape)} vs model {tuple(want)}"
                )
        missing = [n for n in own if n not in accepted]
        if mismatched:
            raise CheckpointShapeError(
                "checkpoint does not fit the model: " + "; ".join(mismatched)
            )
        if missing:
            raise CheckpointShapeError(
                "checkpoint is missing backbone tensors: " + ", ".join(missing)
            )
        self.load_state_dict(accepted)
        self._weights_ready = True
        return report


def resize_pos_table(
    table: torch.Tensor, src_h: int, src_w: int, dst_h: int, dst_w: int
) -> torch.Tensor:
    """Bicubic-resample a ``[1, src_h*src_w, C]`` positional table to a new grid."""
    if (src_h, src_w) == (dst_h, dst_w):
        return table
    C = table.shape[2]
    grid = table.reshape(1, src_h, src_w, C).permute(0, 3, 1, 2)
    grid = F.interpolate(
        grid, size=(dst_h, dst_w), mode="bicubic", align_corners=False
    )
    return grid.permute(0, 2, 3, 1).reshape(1, dst_h * dst_w, C)
