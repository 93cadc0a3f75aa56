import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from maskdiff.denoiser import (BACKBONES, Denoiser, DenoiserConfig, concat_latent, split_latent,
                               timestep_embedding)
from maskdiff.errors import ConfigError, ShapeError


def _small(backbone="tiny-conv", latent_channels=8):
    return DenoiserConfig(latent_channels=latent_channels, base_channels=16, backbone=backbone,
                          cond_channels=16, time_dim=32)


@pytest.mark.parametrize("size", [64, 96])
def test_output_matches_latent(size):
    torch.manual_seed(0)
    net = Denoiser(_small()).eval()
    img = torch.rand(2, 3, size, size)
    with torch.no_grad():
        cond = net.encode_condition(img)
        z = torch.randn(2, 8, size // 8, size // 8)
        out = net(z, torch.tensor([1, 1000]), cond)
    assert cond.fusion.shape == (2, 16, size // 8, size // 8)
    assert len(cond.stages) == 4
    assert out.shape == z.shape


def test_untrained_output_is_finite_and_bounded():
    torch.manual_seed(0)
    net = Denoiser(DenoiserConfig()).eval()
    with torch.no_grad():
        z = torch.randn(2, 8, 8, 8)
        out = net(z, torch.tensor([10, 900]), net.encode_condition(torch.rand(2, 3, 64, 64)))
    assert torch.isfinite(out).all()
    assert out.norm() < 10 * z.norm()


def test_fusion_map_at_full_input_size():
    net = Denoiser(_small()).eval()
    with torch.no_grad():
        assert net.encode_condition(torch.zeros(1, 3, 512, 512)).fusion.shape[-2:] == (64, 64)


def test_non_square_input():
    net = Denoiser(_small()).eval()
    with torch.no_grad():
        cond = net.encode_condition(torch.rand(1, 3, 40, 72))
        out = net(torch.randn(1, 8, 5, 9), 10, cond)
    assert out.shape == (1, 8, 5, 9)


def test_deterministic_in_eval():
    torch.manual_seed(0)
    net = Denoiser(_small()).eval()
    img, z = torch.rand(1, 3, 64, 64), torch.randn(1, 8, 8, 8)
    with torch.no_grad():
        a = net(z, 500, net.encode_condition(img))
        b = net(z, 500, net.encode_condition(img))
    assert torch.equal(a, b)


def test_scalar_and_tensor_timestep_agree():
    torch.manual_seed(0)
    net = Denoiser(_small()).eval()
    with torch.no_grad():
        cond = net.encode_condition(torch.rand(2, 3, 32, 32))
        z = torch.randn(2, 8, 4, 4)
        torch.testing.assert_close(net(z, 7, cond), net(z, torch.tensor([7, 7]), cond))


def test_timestep_changes_output():
    torch.manual_seed(0)
    net = Denoiser(_small()).eval()
    with torch.no_grad():
        cond = net.encode_condition(torch.rand(1, 3, 32, 32))
        z = torch.randn(1, 8, 4, 4)
        assert not torch.allclose(net(z, 1, cond), net(z, 900, cond))


@pytest.mark.parametrize("backbone", sorted(BACKBONES))
def test_backbone_swap_keeps_interface(backbone):
    net = Denoiser(_small(backbone)).eval()
    with torch.no_grad():
        cond = net.encode_condition(torch.rand(1, 3, 64, 64))
        assert net(torch.randn(1, 8, 8, 8), 3, cond).shape == (1, 8, 8, 8)


def test_mask_only_latent():
    net = Denoiser(_small(latent_channels=4)).eval()
    with torch.no_grad():
        cond = net.encode_condition(torch.rand(1, 3, 32, 32))
        assert net(torch.randn(1, 4, 4, 4), 3, cond).shape == (1, 4, 4, 4)


def test_shape_errors():
    net = Denoiser(_small()).eval()
    with torch.no_grad():
        cond = net.encode_condition(torch.rand(1, 3, 32, 32))
        with pytest.raises(ShapeError):
            net(torch.randn(1, 4, 4, 4), 3, cond)
        with pytest.raises(ShapeError):
            net(torch.randn(1, 8, 5, 4), 3, cond)
        with pytest.raises(ShapeError):
            net.encode_condition(torch.rand(1, 3, 30, 32))


def test_condition_repeat_is_member_major():
    net = Denoiser(_small()).eval()
    with torch.no_grad():
        cond = net.encode_condition(torch.rand(2, 3, 32, 32))
    rep = cond.repeat(3)
    assert rep.fusion.shape[0] == 6
    assert torch.equal(rep.fusion[2:4], cond.fusion)
    assert all(torch.equal(r[4:6], s) for r, s in zip(rep.stages, cond.stages))


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(torch.tensor([0, 1, 1000]), 32)
    assert e.shape == (3, 32)
    assert e.abs().max() <= 1.0
    assert torch.equal(e[0, :16], torch.zeros(16))


@settings(max_examples=25, deadline=None)
@given(c=st.integers(1, 6), h=st.integers(1, 5))
def test_split_concat_round_trip(c, h):
    zy, ze = torch.randn(2, c, h, h), torch.randn(2, c, h, h)
    a, b = split_latent(concat_latent(zy, ze))
    assert torch.equal(a, zy) and torch.equal(b, ze)


def test_split_odd_channels():
    with pytest.raises(ShapeError):
        split_latent(torch.zeros(1, 3, 2, 2))
    with pytest.raises(ShapeError):
        concat_latent(torch.zeros(1, 4, 2, 2), torch.zeros(1, 3, 2, 2))


@pytest.mark.parametrize("kw", [{"backbone": "resnet"}, {"base_channels": 4}, {"time_dim": 33}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        DenoiserConfig(**kw)
