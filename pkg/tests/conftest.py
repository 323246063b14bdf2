import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from gazefollower.backbone import ViTConfig
from gazefollower.model import ModelConfig


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


@pytest.fixture
def toy_vit_cfg() -> ViTConfig:
    """1 block, 2 heads, 4x4 patch grid, 8 channels: small enough for FD checks."""
    return ViTConfig(
        embed_dim=8,
        depth=1,
        num_heads=2,
        patch_size=4,
        mlp_ratio=2.0,
        pos_grid=4,
        capture_blocks=(1,),
    )


@pytest.fixture
def toy_model_cfg(toy_vit_cfg) -> ModelConfig:
    return ModelConfig(vit=toy_vit_cfg, guidance_hidden=4, head_widths=(3, 3, 3))
