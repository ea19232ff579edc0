"""Shared fixtures.

Expensive artifacts (pretrained identity encoder, trained models) are
built once and cached under .cache/ at the repo root so repeated test
runs stay fast; delete the directory (or set VFSWAP_TEST_CACHE) to force
a rebuild from scratch.
"""

import os
import pathlib

import numpy as np
import pytest
import torch

from vfswap import config as cfg_mod
from vfswap import dil, latentcodec
from vfswap import trainer as trainer_mod
from vfswap import videodata as vd

REPO_ROOT = pathlib.Path(__file__).resolve().parents[1]
CACHE = pathlib.Path(os.environ.get("VFSWAP_TEST_CACHE", REPO_ROOT / ".cache"))


@pytest.fixture(scope="session")
def cache_dir() -> pathlib.Path:
    CACHE.mkdir(parents=True, exist_ok=True)
    return CACHE


@pytest.fixture(scope="session")
def idenc_path(cache_dir) -> str:
    """Pretrained, frozen stand-in recognition encoder (cached)."""
    path = cache_dir / "idenc.ckpt"
    if not path.exists():
        enc = dil.IdentityEncoder(dim=128, n_classes=256, seed=0)
        dil.pretrain_identity_encoder(enc, 256, steps=600, size=(64, 64), seed=0)
        dil.save_identity_encoder(enc, str(path))
    return str(path)


@pytest.fixture(scope="session")
def idenc(idenc_path) -> dil.IdentityEncoder:
    return dil.load_identity_encoder(idenc_path)


def tiny_config(**train_kw) -> cfg_mod.RunConfig:
    """Smallest config that exercises every code path."""
    cfg = cfg_mod.RunConfig()
    cfg.data = cfg_mod.DataConfig(n_clips=6, frames=4, height=32, width=32,
                                  n_identities=16, seed=3)
    cfg.codec.s = 4
    cfg.denoiser = cfg_mod.DenoiserModelConfig(
        base_channels=16, channel_mults=[1, 2], heads=4, d_model=32,
        temporal_kernel=3, temporal_attn=True)
    cfg.fal.channels = [16, 24, 32]
    cfg.edm.steps = 4
    cfg.train = cfg_mod.TrainerConfig(
        batch_size=2, warmup_steps=1, total_steps=4, checkpoint_every=2,
        **train_kw)
    cfg.train.validate()
    return cfg


@pytest.fixture(scope="session")
def tiny_cfg() -> cfg_mod.RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_codec(tiny_cfg):
    codec = latentcodec.IdentityCodec(s=tiny_cfg.codec.s)
    ds = vd.SyntheticDataset(4, frames=tiny_cfg.data.frames,
                             size=(tiny_cfg.data.height, tiny_cfg.data.width),
                             seed=tiny_cfg.data.seed)
    codec.compute_sigma_data(ds)
    return codec


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg, tiny_codec, idenc) -> trainer_mod.SwapModel:
    """Untrained desk model at the smallest size; shared read-only."""
    return trainer_mod.build_model(tiny_cfg, tiny_codec, idenc)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
