import math

import numpy as np
import pytest
import torch

from vfswap import latentcodec as lc
from vfswap import videodata as vd


def _clip(frames=2, size=(32, 32), seed=0):
    return vd.random_clip(np.random.default_rng(seed), frames=frames, size=size)


def test_identity_codec_s1_is_passthrough():
    clip = _clip()
    lat = lc.IdentityCodec(s=1).encode_clip(clip)
    assert np.array_equal(lat.data, clip.frames)


def test_identity_codec_space_to_depth_shapes():
    codec = lc.IdentityCodec(s=2)
    clip = _clip(size=(64, 64))
    lat = codec.encode_clip(clip)
    assert lat.data.shape == (2, 32, 32, 12)
    assert lat.c == 12


def test_identity_codec_roundtrip_bit_exact():
    codec = lc.IdentityCodec(s=4)
    clip = _clip()
    assert np.array_equal(codec.decode_clip(codec.encode_clip(clip)).frames,
                          clip.frames)


def test_zero_latent_decodes_to_midgray():
    codec = lc.IdentityCodec(s=1)
    out = codec.decode_array(np.zeros((1, 8, 8, 3), np.float32))
    assert np.all(out == vd.MASK_FILL)


def test_non_divisible_dims_error():
    with pytest.raises(ValueError, match="divisible"):
        lc.IdentityCodec(s=4).encode_array(np.zeros((1, 30, 32, 3), np.float32))


def test_wrong_latent_channels_error():
    with pytest.raises(ValueError, match="channels"):
        lc.IdentityCodec(s=2).decode_array(np.zeros((1, 8, 8, 5), np.float32))


def test_torch_bridge_matches_numpy():
    codec = lc.IdentityCodec(s=4)
    clip = _clip()
    lat_np = codec.encode_array(clip.frames)                  # F,h,w,c
    pix = torch.from_numpy(clip.frames).permute(0, 3, 1, 2)
    lat_t = codec.encode_torch(pix)                           # F,c,h,w
    assert np.array_equal(lat_t.permute(0, 2, 3, 1).numpy(), lat_np)
    back = codec.decode_torch(lat_t)
    assert np.array_equal(back.numpy(), pix.numpy())


def test_decode_torch_differentiable():
    codec = lc.IdentityCodec(s=2)
    lat = torch.randn(1, 12, 4, 4, requires_grad=True)
    codec.decode_torch(lat).sum().backward()
    assert torch.all(lat.grad == 1.0)


def test_psnr():
    a = np.zeros((4, 4))
    assert lc.psnr(a, a) == math.inf
    # uniform +0.2 offset: mse 0.04 on peak-to-peak 2 -> 10*log10(4/0.04)
    assert lc.psnr(a, a + 0.2) == pytest.approx(20.0)


def test_sigma_data_statistic():
    codec = lc.IdentityCodec(s=2)
    ds = vd.SyntheticDataset(3, frames=2, size=(32, 32), seed=1)
    sd = codec.compute_sigma_data(ds)
    ref = np.concatenate([codec.encode_clip(ds[i]).data.ravel()
                          for i in range(3)]).std()
    assert sd == pytest.approx(float(ref), rel=1e-12)
    assert codec.sigma_data == sd


def test_codec_archive_roundtrip(tmp_path):
    codec = lc.IdentityCodec(s=2)
    codec.compute_sigma_data(vd.SyntheticDataset(2, frames=1, size=(32, 32)))
    path = str(tmp_path / "codec.ckpt")
    codec.save(path)
    back = lc.load_codec(path)
    assert back.kind == "identity" and back.s == 2 and back.c == codec.c
    assert back.sigma_data == codec.sigma_data


@pytest.fixture(scope="module")
def learned_codec(tmp_path_factory):
    codec = lc.LearnedCodec(s=2, c=8, hidden=32, seed=0)
    train = vd.SyntheticDataset(12, frames=2, size=(32, 32), seed=11)
    codec.pretrain(train, steps=1500, lr=2e-3, seed=0)
    codec.compute_sigma_data(train)
    return codec


def test_learned_codec_roundtrip_psnr(learned_codec):
    held = vd.SyntheticDataset(4, frames=2, size=(32, 32), seed=99)
    vals = []
    for i in range(len(held)):
        clip = held[i]
        rec = learned_codec.decode_clip(learned_codec.encode_clip(clip))
        vals.append(lc.psnr(rec.frames, clip.frames))
    assert float(np.mean(vals)) > 30.0


def test_learned_codec_archive_roundtrip(learned_codec, tmp_path):
    path = str(tmp_path / "codec.ckpt")
    learned_codec.save(path)
    back = lc.load_codec(path)
    clip = _clip(size=(32, 32))
    assert np.array_equal(back.encode_clip(clip).data,
                          learned_codec.encode_clip(clip).data)


def test_learned_codec_requires_power_of_two():
    with pytest.raises(ValueError):
        lc.LearnedCodec(s=3)
