"""Quantitative evaluation: identity retrieval/similarity, synthetic-factor
attribute errors, temporal identity stability (vidd), and a toy Fréchet
video distance over a pinned random-feature extractor."""

import dataclasses

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .nn_blocks import ResBlock2d, reset_parameters, torch_generator
from .videodata import VideoClip

FVD_EXTRACTOR_SEED = 7713  # pins the frozen random-weight feature net


@dataclasses.dataclass
class EvalReport:
    idr: float
    ids: float
    attr_errors: dict
    vidd: float
    fvd: float
    n_samples: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _embed_frames(encoder, frames: np.ndarray) -> torch.Tensor:
    """Global identity embeddings of F,H,W,3 frames."""
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
        return encoder.embed_global(x)


def clip_embedding(encoder, clip: VideoClip) -> np.ndarray:
    """Unit-norm mean-frame identity embedding of a clip."""
    e = _embed_frames(encoder, clip.frames).mean(dim=0)
    return (e / e.norm().clamp_min(1e-12)).numpy()


def build_gallery(encoder, identity_ids, n_views: int = 8, seed: int = 0,
                  size=(64, 64)) -> dict:
    """Per-identity centroid embeddings from fresh renders."""
    from . import videodata as vd
    gallery = {}
    for ident in identity_ids:
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(ident)]))
        frames = np.stack([
            vd.generate_synthetic_clip(
                vd.SyntheticFactors(int(ident), float(rng.uniform(-1, 1)),
                                    float(rng.uniform(0, 1)),
                                    float(rng.uniform(-1, 1)),
                                    bool(rng.uniform() < 0.3)),
                frames=1, size=size).frames[0]
            for _ in range(n_views)])
        e = _embed_frames(encoder, frames).mean(dim=0)
        gallery[int(ident)] = (e / e.norm().clamp_min(1e-12)).numpy()
    return gallery


def id_retrieval(results, gallery: dict, encoder) -> float:
    """Fraction of (clip, source_id) pairs whose mean-frame embedding's
    nearest gallery centroid (cosine) is the true source id."""
    if not results or not gallery:
        raise ValueError("empty results or gallery")
    ids = sorted(gallery)
    mat = np.stack([gallery[i] for i in ids])     # N,dim unit rows
    hits = 0
    for clip, src_id in results:
        if src_id not in gallery:
            raise ValueError(f"source id {src_id} missing from gallery")
        e = clip_embedding(encoder, clip)
        hits += int(ids[int(np.argmax(mat @ e))] == src_id)
    return hits / len(results)


def id_similarity(results, source_embeddings, encoder) -> float:
    """Mean cosine between swapped-clip embeddings and source embeddings."""
    sims = [float(clip_embedding(encoder, clip) @ src)
            for (clip, _), src in zip(results, source_embeddings)]
    return float(np.mean(sims))


def vidd(clip: VideoClip, encoder) -> float:
    """Mean over consecutive frame pairs of 1 - cosine of identity
    embeddings (identity-flicker proxy for temporal consistency)."""
    if clip.num_frames < 2:
        raise ValueError("vidd needs at least 2 frames")
    e = _embed_frames(encoder, clip.frames)
    cos = F.cosine_similarity(e[:-1], e[1:], dim=-1)
    return float((1.0 - cos).mean())


# --- attribute errors ---

class FactorRegressor(nn.Module):
    """Small conv net predicting (pose, lighting, expression) from a frame."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 24, 3, stride=2, padding=1), nn.SiLU(),
            ResBlock2d(24, 48),
            nn.Conv2d(48, 48, 3, stride=2, padding=1), nn.SiLU(),
            ResBlock2d(48, 64),
            nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(64, 64), nn.SiLU(), nn.Linear(64, 3))
        reset_parameters(self, torch_generator(seed))

    def forward(self, x):
        return self.net(x)


def train_factor_regressor(steps: int = 500, batch: int = 32, lr: float = 2e-3,
                           size=(64, 64), seed: int = 0) -> FactorRegressor:
    from . import videodata as vd
    reg = FactorRegressor(seed=seed)
    opt = torch.optim.AdamW(reg.parameters(), lr=lr, weight_decay=0.0)
    for step in range(steps):
        rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
        imgs = np.empty((batch, size[0], size[1], 3), dtype=np.float32)
        ys = np.empty((batch, 3), dtype=np.float32)
        for i in range(batch):
            f = vd.SyntheticFactors(int(rng.integers(0, vd.CODEBOOK_SIZE)),
                                    float(rng.uniform(-1, 1)),
                                    float(rng.uniform(0, 1)),
                                    float(rng.uniform(-1, 1)),
                                    bool(rng.uniform() < 0.3))
            imgs[i] = vd.generate_synthetic_clip(f, frames=1, size=size).frames[0]
            ys[i] = (f.pose, f.lighting, f.expression)
        x = torch.from_numpy(imgs).permute(0, 3, 1, 2)
        loss = torch.mean((reg(x) - torch.from_numpy(ys)) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
    reg.eval()
    for p in reg.parameters():
        p.requires_grad_(False)
    return reg


def save_regressor(reg: FactorRegressor, path: str) -> None:
    ckpt.save_archive(path, {k: v.numpy() for k, v in reg.state_dict().items()}, {})


def load_regressor(path: str) -> FactorRegressor:
    arrays, _ = ckpt.load_archive(path)
    reg = FactorRegressor()
    reg.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    reg.eval()
    for p in reg.parameters():
        p.requires_grad_(False)
    return reg


def attribute_errors(results, targets, regressor: FactorRegressor) -> dict:
    """Per-factor mean absolute error between regressor estimates on result
    frames and the target clips' ground-truth factors."""
    names = ("pose", "lighting", "expression")
    errs = {n: [] for n in names}
    for (clip, _), target in zip(results, targets):
        if target.factors is None:
            raise ValueError("target clip lacks ground-truth factors")
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(clip.frames)).permute(0, 3, 1, 2)
            pred = regressor(x).numpy()
        truth = np.array([[f.pose, f.lighting, f.expression]
                          for f in target.factors])
        for j, n in enumerate(names):
            errs[n].append(float(np.mean(np.abs(pred[:, j] - truth[:, j]))))
    return {n: float(np.mean(v)) for n, v in errs.items()}


# --- FVD ---

class VideoFeatureExtractor(nn.Module):
    """Frozen random-weight spatio-temporal conv net; per-clip features."""

    def __init__(self, feat_dim: int = 64, seed: int = FVD_EXTRACTOR_SEED):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(3, 16, (3, 3, 3), stride=(1, 2, 2), padding=1), nn.Tanh(),
            nn.Conv3d(16, 32, (3, 3, 3), stride=(2, 2, 2), padding=1), nn.Tanh(),
            nn.Conv3d(32, feat_dim, (3, 3, 3), stride=(2, 2, 2), padding=1),
            nn.Tanh())
        reset_parameters(self, torch_generator(seed))
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, clip: VideoClip) -> np.ndarray:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(clip.frames))
            x = x.permute(3, 0, 1, 2)[None]       # 1,3,F,H,W
            h = self.net(x)
        return h.mean(dim=(2, 3, 4)).squeeze(0).numpy()


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(mu_r, cov_r, mu_g, cov_g) -> float:
    s = _sqrt_psd(cov_r)
    cross = _sqrt_psd(s @ cov_g @ s)
    d2 = float(np.sum((mu_r - mu_g) ** 2)
               + np.trace(cov_r + cov_g - 2.0 * cross))
    return max(d2, 0.0)


def fvd(real_clips, generated_clips, extractor: VideoFeatureExtractor,
        eps: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of per-clip features."""
    if len(real_clips) < 2 or len(generated_clips) < 2:
        raise ValueError("need at least 2 clips per side")
    fr = np.stack([extractor(c) for c in real_clips]).astype(np.float64)
    fg = np.stack([extractor(c) for c in generated_clips]).astype(np.float64)
    mu_r, mu_g = fr.mean(0), fg.mean(0)
    cov_r = np.cov(fr, rowvar=False) + eps * np.eye(fr.shape[1])
    cov_g = np.cov(fg, rowvar=False) + eps * np.eye(fg.shape[1])
    return frechet_distance(mu_r, cov_r, mu_g, cov_g)
