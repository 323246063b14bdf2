"""Interaction stack assembly and guidance-weighted aggregation oracles."""

import numpy as np
import pytest
import torch

from gazefollower.backbone import PatchGrid
from gazefollower.interaction import (
    aggregate_inout_feature,
    aggregate_person_features,
    assemble_interaction_stack,
    person_features_from_attention,
)


def random_attention(B, H, n_patches, seed=0):
    """Row-stochastic maps over (1 + n_patches) tokens."""
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(B, H, 1 + n_patches, 1 + n_patches, generator=g)
    return torch.softmax(logits, dim=-1)


def random_guidance(B, h, w, seed=0):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(B, h * w, generator=g)
    return torch.softmax(logits, dim=-1).reshape(B, h, w)


def loop_aggregate_person(stack: np.ndarray, guidance: np.ndarray) -> np.ndarray:
    """Explicit double loop over query positions."""
    C, h, w = stack.shape[0], stack.shape[1], stack.shape[2]
    out = np.zeros((C, stack.shape[3], stack.shape[4]))
    for qy in range(h):
        for qx in range(w):
            out += guidance[qy, qx] * stack[:, qy, qx]
    return out


def loop_aggregate_inout(tokens: np.ndarray, guidance: np.ndarray) -> np.ndarray:
    C, h, w = tokens.shape
    out = np.zeros(C)
    for qy in range(h):
        for qx in range(w):
            out += guidance[qy, qx] * tokens[:, qy, qx]
    return out


class TestAssemble:
    def test_default_shape(self):
        grid = PatchGrid(16, 16, 14)
        attn = [random_attention(1, 6, 256, seed=i) for i in range(4)]
        stack = assemble_interaction_stack(attn, grid)
        assert tuple(stack.shape) == (1, 24, 16, 16, 16, 16)

    def test_single_patch_keeps_self_share(self):
        grid = PatchGrid(1, 1, 14)
        attn = [random_attention(1, 1, 1, seed=3)]
        stack = assemble_interaction_stack(attn, grid)
        assert tuple(stack.shape) == (1, 1, 1, 1, 1, 1)
        assert stack[0, 0, 0, 0, 0, 0] == attn[0][0, 0, 1, 1]

    def test_index_arithmetic_oracle(self):
        grid = PatchGrid(3, 4, 14)
        K, H = 2, 3
        attn = [random_attention(1, H, 12, seed=10 + k) for k in range(K)]
        stack = assemble_interaction_stack(attn, grid)
        rng = np.random.default_rng(0)
        for _ in range(50):
            c = rng.integers(K * H)
            layer, head = divmod(int(c), H)
            qy, ky = rng.integers(3, size=2)
            qx, kx = rng.integers(4, size=2)
            expected = attn[layer][0, head, 1 + qy * 4 + qx, 1 + ky * 4 + kx]
            assert stack[0, c, qy, qx, ky, kx] == expected

    def test_rows_lose_only_class_mass(self):
        grid = PatchGrid(2, 2, 14)
        attn = [random_attention(1, 2, 4, seed=5)]
        stack = assemble_interaction_stack(attn, grid)
        # each (channel, query) slice sums to 1 minus the class-token share
        sums = stack.sum(dim=(-2, -1))
        cls_share = attn[0][:, :, 1:, 0].reshape(1, 2, 2, 2)
        assert torch.allclose(sums + cls_share, torch.ones_like(sums), atol=1e-6)
        assert (sums < 1.0).all()

    def test_length_mismatch_rejected(self):
        grid = PatchGrid(3, 3, 14)
        with pytest.raises(ValueError, match="inconsistent"):
            assemble_interaction_stack([random_attention(1, 2, 8)], grid)

    def test_renormalize_flag_restores_row_sums(self):
        grid = PatchGrid(2, 2, 14)
        attn = [random_attention(1, 2, 4, seed=6)]
        plain = assemble_interaction_stack(attn, grid)
        renorm = assemble_interaction_stack(attn, grid, renormalize=True)
        assert (plain.sum(dim=(-2, -1)) < 1.0).all()
        assert torch.allclose(
            renorm.sum(dim=(-2, -1)), torch.ones(1, 2, 2, 2), atol=1e-6
        )
        # same renormalization applied on the fused path
        G = random_guidance(1, 2, 2, seed=6)
        fused = person_features_from_attention(attn, G, grid, renormalize=True)
        assembled = aggregate_person_features(renorm, G)
        assert torch.allclose(fused, assembled, atol=1e-6)


class TestAggregatePerson:
    def test_one_hot_guidance_selects_row(self):
        grid = PatchGrid(4, 4, 14)
        attn = [random_attention(1, 2, 16, seed=2)]
        stack = assemble_interaction_stack(attn, grid)
        G = torch.zeros(1, 4, 4)
        G[0, 1, 2] = 1.0
        out = aggregate_person_features(stack, G)
        assert torch.allclose(out[0], stack[0, :, 1, 2], atol=1e-7)

    def test_uniform_two_patch_guidance_averages(self):
        grid = PatchGrid(2, 2, 14)
        attn = [random_attention(1, 1, 4, seed=8)]
        stack = assemble_interaction_stack(attn, grid)
        G = torch.zeros(1, 2, 2)
        G[0, 0, 0] = 0.5
        G[0, 1, 1] = 0.5
        out = aggregate_person_features(stack, G)
        expected = (stack[0, :, 0, 0] + stack[0, :, 1, 1]) / 2
        assert torch.allclose(out[0], expected, atol=1e-7)

    def test_matches_loop_oracle(self):
        grid = PatchGrid(8, 8, 14)
        attn = [random_attention(1, 6, 64, seed=k) for k in range(4)]
        stack = assemble_interaction_stack(attn, grid)
        G = random_guidance(1, 8, 8, seed=42)
        out = aggregate_person_features(stack, G)
        oracle = loop_aggregate_person(stack[0].numpy(), G[0].numpy())
        assert np.abs(out[0].numpy() - oracle).max() < 1e-5

    def test_linearity_in_guidance(self):
        grid = PatchGrid(4, 4, 14)
        attn = [random_attention(1, 2, 16, seed=7)]
        stack = assemble_interaction_stack(attn, grid)
        g1 = random_guidance(1, 4, 4, seed=1)
        g2 = random_guidance(1, 4, 4, seed=2)
        for alpha in (0.0, 0.25, 0.5, 1.0):
            mixed = aggregate_person_features(stack, alpha * g1 + (1 - alpha) * g2)
            combo = alpha * aggregate_person_features(stack, g1) + (
                1 - alpha
            ) * aggregate_person_features(stack, g2)
            assert torch.allclose(mixed, combo, atol=1e-6)

    def test_convexity_bounds(self):
        grid = PatchGrid(4, 4, 14)
        attn = [random_attention(1, 3, 16, seed=9)]
        stack = assemble_interaction_stack(attn, grid)
        G = random_guidance(1, 4, 4, seed=3)
        out = aggregate_person_features(stack, G)
        per_channel = stack.reshape(1, 3, -1)
        lo = per_channel.min(dim=-1).values
        hi = per_channel.max(dim=-1).values
        assert (out.reshape(1, 3, -1).min(dim=-1).values >= lo - 1e-7).all()
        assert (out.reshape(1, 3, -1).max(dim=-1).values <= hi + 1e-7).all()

    def test_fused_path_equals_assembled_path(self):
        grid = PatchGrid(8, 8, 14)
        attn = [random_attention(2, 6, 64, seed=k + 20) for k in range(4)]
        G = random_guidance(2, 8, 8, seed=11)
        fused = person_features_from_attention(attn, G, grid)
        assembled = aggregate_person_features(assemble_interaction_stack(attn, grid), G)
        assert (fused - assembled).abs().max().item() < 1e-6

    def test_gradients_flow(self):
        grid = PatchGrid(2, 2, 14)
        attn = [random_attention(1, 1, 4, seed=4).double().requires_grad_(True)]
        G = random_guidance(1, 2, 2, seed=4).double().requires_grad_(True)
        assert torch.autograd.gradcheck(
            lambda a, g: person_features_from_attention([a], g, grid).sum(),
            (attn[0], G), eps=1e-6, rtol=1e-3,
        )


class TestAggregateInOut:
    def test_one_hot_selects_token(self):
        tok = torch.randn(1, 5, 3, 4)
        G = torch.zeros(1, 3, 4)
        G[0, 2, 1] = 1.0
        out = aggregate_inout_feature(tok, G)
        assert torch.allclose(out[0], tok[0, :, 2, 1])

    def test_equal_tokens_fixed_point(self):
        t = torch.randn(6)
        tok = t.reshape(1, 6, 1, 1).expand(1, 6, 4, 4).contiguous()
        G = random_guidance(1, 4, 4, seed=12)
        out = aggregate_inout_feature(tok, G)
        assert torch.allclose(out[0], t, atol=1e-6)

    def test_matches_loop_oracle(self):
        tok = torch.randn(1, 7, 8, 8)
        G = random_guidance(1, 8, 8, seed=13)
        out = aggregate_inout_feature(tok, G)
        oracle = loop_aggregate_inout(tok[0].numpy(), G[0].numpy())
        assert np.abs(out[0].numpy() - oracle).max() < 1e-5
