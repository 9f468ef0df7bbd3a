import math

import numpy as np
import pytest
import torch

from scarnet.blocks import SEBlock, SpatialGate, initialize, multi_head_attention
from scarnet.errors import ConfigError, ShapeError
from scarnet.medsam import BranchConfig, MedSAMBranch, PatchEmbedding, SelfAttention, TransformerBlock, patchify
from scarnet.phantom import split_into_patches

SMALL = BranchConfig(patch_size=8, d=32, L=2, num_heads=4, neck_channels=[32, 16, 16, 8])


def test_patchify_matches_numpy_split():
    img = np.random.default_rng(0).normal(size=(32, 48))
    ours = patchify(torch.from_numpy(img)[None, None], 16)[0].numpy()
    ref = split_into_patches(img, 16).reshape(-1, 256)
    np.testing.assert_array_equal(ours, ref)


def test_patch_embedding_linear_plus_position():
    torch.manual_seed(0)
    emb = PatchEmbedding(4, 8, 6)
    x = torch.randn(2, 6, 4, 4)
    expected = x.flatten(2) @ emb.proj.weight.T + emb.pos
    torch.testing.assert_close(emb(x), expected)
    torch.testing.assert_close(emb(x.flatten(2)), expected)


def test_positional_init_scale():
    torch.manual_seed(0)
    emb = PatchEmbedding(16, 256, 256)
    assert emb.pos.std().item() == pytest.approx(0.02, rel=0.05)


def test_patch_embedding_rejects_bad_shapes():
    emb = PatchEmbedding(4, 8, 6)
    with pytest.raises(ShapeError):
        emb(torch.zeros(1, 6, 5, 5))
    with pytest.raises(ShapeError):
        emb(torch.zeros(1, 7, 16))


def _identity_attention():
    attn = SelfAttention(2, 1).double()
    with torch.no_grad():
        for lin in (attn.q, attn.k, attn.out):
            lin.weight.copy_(torch.eye(2))
            lin.bias.zero_()
        attn.v.weight.copy_(torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
        attn.v.bias.zero_()
    return attn


def test_self_attention_hand_case():
    # scores = I / sqrt(2); V rows are columns of W_v
    attn = _identity_attention()
    out = attn(torch.eye(2, dtype=torch.float64)[None], keep_weights=True)[0].detach()
    w = attn.last_weights[0, 0]
    np.testing.assert_allclose(w.numpy(), [[0.66976155, 0.33023845], [0.33023845, 0.66976155]], atol=1e-8)
    np.testing.assert_allclose(out.numpy(), [[1.33023845, 3.33023845], [1.66976155, 3.66976155]], atol=1e-8)


def test_attention_weights_are_distributions():
    torch.manual_seed(1)
    q, k, v = torch.randn(3, 2, 5, 16).unbind(0)
    _, w = multi_head_attention(q, k, v, 4)
    assert w.shape == (2, 4, 5, 5)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 4, 5))


def test_multi_head_matches_torch():
    torch.manual_seed(2)
    q, k, v = torch.randn(3, 2, 7, 16, dtype=torch.float64).unbind(0)
    ours, _ = multi_head_attention(q, k, v, 4)
    ref = torch.nn.functional.scaled_dot_product_attention(
        *(t.reshape(2, 7, 4, 4).transpose(1, 2) for t in (q, k, v))).transpose(1, 2).reshape(2, 7, 16)
    torch.testing.assert_close(ours, ref)


def test_transformer_block_residual_structure():
    torch.manual_seed(3)
    block = TransformerBlock(16, 4).double()
    z = torch.randn(2, 5, 16, dtype=torch.float64)
    z1 = block.attn(block.norm1(z)) + z
    expected = block.mlp(block.norm2(z1)) + z1
    torch.testing.assert_close(block(z), expected)


def test_se_hand_case():
    se = SEBlock(2, reduction=2).double()
    with torch.no_grad():
        se.fc1.weight.copy_(torch.tensor([[1.0, 1.0]]))
        se.fc1.bias.zero_()
        se.fc2.weight.copy_(torch.tensor([[1.0], [-1.0 / 3.0]]))
        se.fc2.bias.zero_()
    x = torch.stack([torch.full((3, 3), 1.0), torch.full((3, 3), 2.0)])[None].double()
    s = torch.sigmoid(torch.tensor([3.0, -1.0], dtype=torch.float64))
    torch.testing.assert_close(se.gate(x)[0], s)
    torch.testing.assert_close(se(x), x * s[None, :, None, None])


def test_spatial_gate_hand_case():
    gate = SpatialGate().double()
    with torch.no_grad():
        gate.conv.weight.copy_(torch.tensor([0.15, 0.10]).reshape(1, 2, 1, 1))
        gate.conv.bias.fill_(0.1)
    f = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    # single channel: mean and max maps both equal f
    torch.testing.assert_close(gate(f), f * torch.sigmoid(0.25 * f + 0.1))


def test_zero_init_gates_start_neutral():
    se, sp = initialize(SEBlock(8, 4)), initialize(SpatialGate())
    x = torch.randn(2, 8, 5, 5)
    torch.testing.assert_close(se.gate(x), torch.full((2, 8), 0.5))
    torch.testing.assert_close(sp.attention(x), torch.full((2, 1, 5, 5), 0.5))


@pytest.mark.parametrize("size", [(32, 32), (64, 32)])
def test_branch_output_shape(size):
    torch.manual_seed(0)
    branch = MedSAMBranch(SMALL, size)
    out = branch(torch.randn(2, 1, *size))
    assert out.shape == (2, 8, *size)
    assert torch.isfinite(out).all()


def test_branch_default_widths():
    cfg = BranchConfig()
    assert (cfg.patch_size, cfg.d, cfg.L, cfg.num_heads) == (16, 256, 4, 8)
    assert cfg.out_channels == 32


def test_branch_gradient_matches_finite_difference():
    from conftest import central_difference
    torch.manual_seed(4)
    branch = MedSAMBranch(BranchConfig(patch_size=4, d=8, L=1, num_heads=2, neck_channels=[8, 8, 8, 8],
                                       se_reduction=4), (8, 8)).double()
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 8, 8, 8, dtype=torch.float64)
    f = lambda: (branch(x) * w).sum()
    g, = torch.autograd.grad(f(), x)
    for idx in [(0, 0, 1, 2), (0, 0, 7, 7), (0, 0, 4, 0)]:
        num = central_difference(f, x, idx, h=1e-6)
        assert abs(num - g[idx].item()) <= 1e-6 * max(1.0, abs(num))


def test_branch_rejects_indivisible_image():
    with pytest.raises(ShapeError):
        MedSAMBranch(SMALL, (36, 32))


def test_config_validation():
    with pytest.raises(ConfigError):
        BranchConfig(d=30, num_heads=8).validate()
    with pytest.raises(ConfigError):
        BranchConfig(patch_size=12).validate()
