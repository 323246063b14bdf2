"""Assembled-model contracts: shapes, guidance support, internal exports."""

import pytest
import torch

from gazefollower.backbone import ViTConfig
from gazefollower.model import GazeModel, ModelConfig


@pytest.fixture
def small_model():
    return GazeModel(ModelConfig(
        vit=ViTConfig(embed_dim=8, depth=2, num_heads=2, patch_size=14,
                      mlp_ratio=2.0, pos_grid=4, capture_blocks=(1, 2)),
        guidance_hidden=4, head_widths=(3, 3, 3),
    )).eval()


class TestForward:
    def test_output_shape_law(self, small_model):
        boxes = torch.tensor([[0.2, 0.2, 0.6, 0.6]])
        for res in (56, 112):
            h = res // 14
            with torch.no_grad():
                out = small_model(torch.randn(1, 3, res, res), boxes)
            assert tuple(out["heatmap"].shape) == (1, 8 * h, 8 * h)
            assert tuple(out["guidance"].shape) == (1, h, h)

    def test_guidance_supported_on_head_mask(self, small_model):
        boxes = torch.tensor([[0.0, 0.0, 0.3, 0.3], [0.6, 0.6, 1.0, 1.0]])
        with torch.no_grad():
            out = small_model(torch.randn(2, 3, 56, 56), boxes)
        G, mask = out["guidance"], out["head_mask"]
        assert (G[~mask] == 0).all()
        assert torch.allclose(G.sum(dim=(-2, -1)), torch.ones(2), atol=1e-5)

    def test_internals_exported_on_request(self, small_model):
        boxes = torch.tensor([[0.2, 0.2, 0.6, 0.6]])
        with torch.no_grad():
            out = small_model(
                torch.randn(1, 3, 56, 56), boxes, return_internals=True
            )
        assert len(out["attention"]) == 2
        assert tuple(out["person_features"].shape) == (1, 4, 4, 4)
        assert tuple(out["final_tokens"].shape) == (1, 17, 8)

    def test_capture_levels_differ(self, small_model):
        # channel means of different capture blocks must not coincide
        boxes = torch.tensor([[0.2, 0.2, 0.6, 0.6]])
        with torch.no_grad():
            out = small_model(
                torch.rand(1, 3, 56, 56), boxes, return_internals=True
            )
        person = out["person_features"][0]
        first = person[:2].mean(dim=0)
        last = person[2:].mean(dim=0)
        assert (first - last).abs().max().item() > 1e-6

    def test_mask_token_changes_prediction(self, small_model):
        boxes = torch.tensor([[0.2, 0.2, 0.6, 0.6]])
        image = torch.rand(1, 3, 56, 56)
        patch_mask = torch.zeros(1, 4, 4, dtype=torch.bool)
        patch_mask[0, 3, 3] = True
        with torch.no_grad():
            base = small_model(image, boxes)
            masked = small_model(image, boxes, patch_mask)
        assert not torch.equal(base["heatmap"], masked["heatmap"])

    def test_batch_order_independence(self, small_model):
        images = torch.rand(2, 3, 56, 56)
        boxes = torch.tensor([[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]])
        with torch.no_grad():
            fwd = small_model(images, boxes)
            swapped = small_model(images.flip(0), boxes.flip(0))
        assert torch.allclose(fwd["heatmap"][0], swapped["heatmap"][1], atol=1e-5)
        assert torch.allclose(fwd["p_out"][0], swapped["p_out"][1], atol=1e-6)
