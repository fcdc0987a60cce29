import pytest
import torch
from conftest import randomize
from oracles import cot_reference, finite_difference_errors

from ccspnet.errors import ConfigurationError, InputError
from ccspnet.nn_core import Backbone, CCSPBlock, CCSPNeck, CoTLayer


def test_cot_preserves_shape():
    layer = CoTLayer(8)
    assert layer(torch.randn(1, 8, 6, 6)).shape == (1, 8, 6, 6)


def test_cot_zero_weights_gives_zero_map():
    layer = CoTLayer(8)
    with torch.no_grad():
        for p in layer.parameters():
            p.zero_()
    out = layer(torch.randn(1, 8, 6, 6))
    assert torch.equal(out, torch.zeros_like(out))


@pytest.mark.parametrize("channels,heads,kernel", [(4, 1, 3), (4, 2, 3), (6, 3, 5)])
def test_cot_matches_sliding_window_reference(channels, heads, kernel):
    layer = randomize(CoTLayer(channels, kernel, reduction=2, heads=heads).double(), seed=3)
    x = torch.randn(1, channels, 3, 3, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    ref, ref_w = cot_reference(layer, x[0].numpy())
    out = layer(x)[0].detach().numpy()
    _, w = layer.attention(x)
    assert abs(out - ref).max() < 1e-6
    assert abs(w[0].detach().numpy() - ref_w).max() < 1e-6


def test_cot_attention_weights_normalized():
    layer = randomize(CoTLayer(8, heads=2).double(), seed=9, scale=2.0)
    _, w = layer.attention(torch.randn(2, 8, 5, 7, dtype=torch.float64))
    assert (w >= 0).all()
    assert torch.allclose(w.sum(dim=2), torch.ones(2, 2, 5, 7, dtype=torch.float64), atol=1e-6)


def test_cot_configuration_errors():
    with pytest.raises(ConfigurationError):
        CoTLayer(8, kernel_size=4)
    with pytest.raises(ConfigurationError):
        CoTLayer(6, heads=4)
    with pytest.raises(ConfigurationError):
        CoTLayer(8)(torch.randn(1, 4, 6, 6))


def test_ccsp_zero_branches_is_identity():
    block = CCSPBlock(16)
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    x = torch.randn(2, 16, 8, 8)
    assert torch.equal(block(x), x)


def test_ccsp_shape_and_channel_check():
    block = CCSPBlock(16)
    assert block(torch.randn(2, 16, 8, 8)).shape == (2, 16, 8, 8)
    with pytest.raises(ConfigurationError):
        block(torch.randn(2, 8, 8, 8))


def test_ccsp_gradients_match_finite_differences():
    block = randomize(CCSPBlock(4, reduction=2).double(), seed=11)
    x = torch.randn(1, 4, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    params = list(block.parameters())
    errors = finite_difference_errors(lambda: block(x).sum(), params)
    assert max(errors) <= 1e-3, dict(zip([n for n, _ in block.named_parameters()], errors))


def test_batch_equivariance():
    block = randomize(CCSPBlock(8).double(), seed=4)
    a, b = torch.randn(1, 8, 6, 6, dtype=torch.float64), torch.randn(1, 8, 6, 6, dtype=torch.float64)
    joint = block(torch.cat([a, b]))
    assert torch.allclose(joint, torch.cat([block(a), block(b)]), atol=1e-6)


@pytest.mark.parametrize(
    "hw,expected",
    [((64, 64), [(8, 8), (4, 4), (2, 2)]), ((96, 64), [(12, 8), (6, 4), (3, 2)])],
)
def test_backbone_strides(hw, expected):
    bb = Backbone()
    scales = bb(torch.randn(1, 3, *hw))
    assert [tuple(s.shape[-2:]) for s in scales] == expected
    assert [s.shape[1] for s in scales] == [8, 16, 32]


def test_backbone_rejects_non_multiple_of_32():
    with pytest.raises(InputError):
        Backbone()(torch.randn(1, 3, 60, 60))


def test_neck_preserves_spatial_dims_and_widths():
    neck = CCSPNeck((8, 16, 32))
    scales = [torch.randn(1, 8, 8, 8), torch.randn(1, 16, 4, 4), torch.randn(1, 32, 2, 2)]
    out = neck(scales)
    assert [tuple(o.shape[1:]) for o in out] == [(8, 8, 8), (16, 4, 4), (32, 2, 2)]
    with pytest.raises(ConfigurationError):
        neck(scales[:2])


def test_neck_gradients_match_finite_differences():
    neck = randomize(CCSPNeck((4, 8, 16), reduction=4).double(), seed=21, scale=0.3)
    gen = torch.Generator().manual_seed(8)
    scales = [torch.randn(1, c, s, s, dtype=torch.float64, generator=gen) for c, s in ((4, 4), (8, 2), (16, 1))]
    params = list(neck.parameters())
    errors = finite_difference_errors(lambda: sum(o.sum() for o in neck(scales)), params)
    assert max(errors) <= 1e-3
