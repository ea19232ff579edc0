import numpy as np
import pytest
import torch

from vfswap import edm
from vfswap.denoiser import (ConditioningBundle, DenoiserConfig, EdmDenoiser,
                             SpatioTemporalUNet)

CFG = DenoiserConfig(latent_channels=8, attr_channels=6, base_channels=8,
                     channel_mults=(1, 2), heads=4, d_model=16, frames=4,
                     emb_dim=16)


@pytest.fixture(scope="module")
def unet():
    net = SpatioTemporalUNet(CFG, seed=0).eval()
    net.sigma_data = 0.5
    return net


def _cond(B=1, F=4, hw=8, tokens=True, attr=True, mask=None, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return ConditioningBundle(
        masked_target_latent=torch.randn(B, 8, F, hw, hw, generator=gen),
        identity_tokens=(torch.randn(B, 49, 16, generator=gen)
                         if tokens else None),
        attribute_low=(torch.randn(B, 6, F, hw, hw, generator=gen)
                       if attr else None),
        frame_mask=torch.ones(B, F) if mask is None else mask)


def _x(B=1, F=4, hw=8, seed=1):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(B, 8, F, hw, hw, generator=gen)


def _cn(B=1):
    return torch.zeros(B)


def test_zero_frame_mask_equals_zero_attributes(unet):
    x = _x()
    cond = _cond(mask=torch.zeros(1, 4))
    zeroed = _cond()
    zeroed.attribute_low = torch.zeros_like(zeroed.attribute_low)
    zeroed.masked_target_latent = cond.masked_target_latent
    zeroed.identity_tokens = cond.identity_tokens
    with torch.no_grad():
        a = unet(x, _cn(), cond)
        b = unet(x, _cn(), zeroed)
    assert torch.equal(a, b)


def test_none_attribute_low_equals_zero_mask(unet):
    x = _x(seed=2)
    gated = _cond(seed=3, mask=torch.zeros(1, 4))
    absent = ConditioningBundle(gated.masked_target_latent,
                                gated.identity_tokens, None, torch.ones(1, 4))
    with torch.no_grad():
        a = unet(x, _cn(), gated)
        b = unet(x, _cn(), absent)
    assert torch.equal(a, b)


def test_zero_mask_kills_attribute_gradient(unet):
    x = _x(seed=4)
    cond = _cond(seed=5, mask=torch.zeros(1, 4))
    cond.attribute_low.requires_grad_(True)
    out = unet(x, _cn(), cond)
    grad = torch.autograd.grad(out.sum(), cond.attribute_low,
                               allow_unused=True)[0]
    assert grad is None or torch.all(grad == 0)


def test_single_frame_forward(unet):
    with torch.no_grad():
        out = unet(_x(F=1, seed=6), _cn(), _cond(F=1, seed=6))
    assert out.shape == (1, 8, 1, 8, 8)


def test_token_count_enforced(unet):
    cond = _cond(seed=7)
    cond.identity_tokens = torch.randn(1, 48, 16)
    with pytest.raises(ValueError, match="49"):
        unet(_x(), _cn(), cond)


def test_frame_mask_length_enforced(unet):
    cond = _cond(seed=8, mask=torch.ones(1, 3))
    with pytest.raises(ValueError, match="frame_mask"):
        unet(_x(), _cn(), cond)


def test_null_tokens_used_when_identity_absent(unet):
    cond = _cond(tokens=False, seed=9)
    explicit = ConditioningBundle(
        cond.masked_target_latent,
        unet.null_tokens[None].clone(),
        cond.attribute_low, cond.frame_mask)
    x = _x(seed=10)
    with torch.no_grad():
        a = unet(x, _cn(), cond)
        b = unet(x, _cn(), explicit)
    assert torch.equal(a, b)


def test_frame_permutation_equivariance_with_local_ops():
    cfg = DenoiserConfig(latent_channels=8, attr_channels=6, base_channels=8,
                         channel_mults=(1, 2), heads=4, d_model=16, frames=4,
                         emb_dim=16, temporal_kernel=1, temporal_attn=False)
    net = SpatioTemporalUNet(cfg, seed=1).eval()
    x = _x(seed=11)
    cond = _cond(seed=12)
    perm = torch.tensor([2, 0, 3, 1])
    cond_p = ConditioningBundle(
        cond.masked_target_latent[:, :, perm],
        cond.identity_tokens,
        cond.attribute_low[:, :, perm],
        cond.frame_mask[:, perm])
    with torch.no_grad():
        out = net(x, _cn(), cond)
        out_p = net(x[:, :, perm], _cn(), cond_p)
    assert torch.allclose(out[:, :, perm], out_p, atol=1e-6)


def test_conditioning_bundle_slicing():
    cond = _cond(F=4, seed=13)
    sl = cond.slice_frames(1, 3)
    assert sl.num_frames == 2
    assert torch.equal(sl.masked_target_latent,
                       cond.masked_target_latent[:, :, 1:3])
    assert torch.equal(sl.attribute_low, cond.attribute_low[:, :, 1:3])
    assert torch.equal(sl.frame_mask, cond.frame_mask[:, 1:3])
    assert sl.identity_tokens is cond.identity_tokens
    assert cond.without_identity().identity_tokens is None


def test_edm_denoiser_matches_manual_recomposition(unet):
    den = EdmDenoiser(unet)
    x = _x(seed=14)
    cond = _cond(seed=14)
    sigma = 0.9
    with torch.no_grad():
        out = den(x, sigma, cond)
        c = edm.precondition(sigma, unet.sigma_data)
        raw = unet(torch.tensor(c.c_in) * x,
                   torch.full((1,), c.c_noise), cond)
        ref = c.c_skip * x + c.c_out * raw
    assert torch.allclose(out, ref, rtol=1e-6, atol=1e-7)


def test_cfg_with_null_tokens_on_both_branches(unet):
    den = EdmDenoiser(unet)
    x = _x(seed=15)
    cond = _cond(tokens=False, seed=15)
    with torch.no_grad():
        pred_c = den(x, 1.3, cond)
        pred_u = den(x, 1.3, cond.without_identity())
    assert torch.equal(pred_c, pred_u)
    assert torch.equal(edm.cfg_combine(pred_u, pred_c, 2.0), pred_c)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(base_channels=6, channel_mults=(1,), heads=4)
    with pytest.raises(ValueError):
        DenoiserConfig(d_model=18, heads=4)
