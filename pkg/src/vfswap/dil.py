"""Detailed identity learning: a trainable identity encoder standing in
for a pretrained recognition model, the detailed-feature tokenizer, and
the identity loss on generated frames.

The encoder is a 4-stage residual CNN whose last stage is 7x7, so the
tokenizer always yields exactly 49 tokens. It is pretrained with a
margin-softmax classifier on the synthetic identity codebook, then frozen.
"""

import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .nn_blocks import ResBlock2d, reset_parameters, torch_generator

TOKEN_GRID = 7
NUM_TOKENS = TOKEN_GRID * TOKEN_GRID
ENCODER_INPUT = 56      # stem + stages: 56 -> 28 -> 14 -> 7 -> 7 -> 7


@dataclasses.dataclass
class IdentityBundle:
    f_gid: torch.Tensor    # N,dim unit-norm global identity vectors
    f_did: torch.Tensor    # N,C,7,7 detailed spatial identity map
    t_did: torch.Tensor    # N,49,d_model tokens


class IdentityEncoder(nn.Module):
    def __init__(self, dim: int = 128, stage_channels=(32, 64, 96, 128),
                 n_classes: int = 256, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.stage_channels = tuple(stage_channels)
        self.stem = nn.Conv2d(3, stage_channels[0], 3, stride=2, padding=1)
        stages = []
        prev = stage_channels[0]
        # strides 2,2,1,1: 56 -> (stem) 28 -> 14 -> 7 -> 7 -> 7
        for ch, stride in zip(stage_channels, (2, 2, 1, 1)):
            stages.append(nn.Sequential(
                ResBlock2d(prev, ch),
                nn.Conv2d(ch, ch, 3, stride=stride, padding=1)))
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(prev, dim)
        # margin-softmax class weights, used only during pretraining
        self.class_weights = nn.Parameter(torch.empty(n_classes, dim))
        gen = torch_generator(seed)
        reset_parameters(self, gen)
        with torch.no_grad():
            self.class_weights.copy_(torch.randn(self.class_weights.shape,
                                                 generator=gen) * 0.05)

    def _prep(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-1] != images.shape[-2]:
            raise ValueError(f"expected square input, got {tuple(images.shape)}")
        return F.interpolate(images, size=(ENCODER_INPUT, ENCODER_INPUT),
                             mode="bilinear", align_corners=False)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Detailed map f_did: N,C,7,7 from N,3,H,W images in [-1,1]."""
        h = self.stem(self._prep(images))
        for stage in self.stages:
            h = stage(h)
        if h.shape[-2:] != (TOKEN_GRID, TOKEN_GRID):
            raise ValueError(f"last stage is {tuple(h.shape[-2:])}, expected 7x7")
        return h

    def global_from_detailed(self, f_did: torch.Tensor) -> torch.Tensor:
        g = f_did.mean(dim=(2, 3))
        g = self.fc(g)
        return g / g.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def embed_detailed(self, images: torch.Tensor) -> torch.Tensor:
        return self.features(images)

    def embed_global(self, images: torch.Tensor) -> torch.Tensor:
        return self.global_from_detailed(self.features(images))

    def margin_logits(self, f_gid: torch.Tensor, labels: torch.Tensor,
                      scale: float = 16.0, margin: float = 0.2) -> torch.Tensor:
        w = self.class_weights / self.class_weights.norm(dim=-1, keepdim=True)
        cos = f_gid @ w.t()
        onehot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        return scale * (cos - margin * onehot)

    def linear_logits(self, images: torch.Tensor) -> torch.Tensor:
        """Unnormalized-feature logits, used only to warm up pretraining.

        The cosine objective barely moves from a random start (all class
        cosines are near zero, so gradients stay tiny for hundreds of
        steps); a plain linear head escapes that plateau quickly and
        leaves class_weights directionally aligned for the margin phase.
        """
        g = self.fc(self.features(images).mean(dim=(2, 3)))
        return g @ self.class_weights.t()


class DetailedIdentityTokenizer(nn.Module):
    """1x1 conv to d_model, row-major flatten of the 7x7 cells into 49
    tokens, plus an optional learned positional embedding."""

    def __init__(self, in_ch: int, d_model: int = 128,
                 positional: bool = True, seed: int = 0):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, d_model, 1)
        self.positional = positional
        self.pos_emb = nn.Parameter(torch.zeros(NUM_TOKENS, d_model))
        gen = torch_generator(seed)
        reset_parameters(self, gen)
        with torch.no_grad():
            self.pos_emb.copy_(torch.randn(self.pos_emb.shape, generator=gen) * 0.02)

    def forward(self, f_did: torch.Tensor) -> torch.Tensor:
        if f_did.shape[-2:] != (TOKEN_GRID, TOKEN_GRID):
            raise ValueError(f"expected 7x7 detailed map, got "
                             f"{tuple(f_did.shape[-2:])}")
        t = self.proj(f_did)                               # N,d,7,7
        t = t.flatten(2).transpose(1, 2)                   # N,49,d row-major
        if self.positional:
            t = t + self.pos_emb[None]
        return t


def identity_loss(f_gid_source: torch.Tensor, frame_embeddings: torch.Tensor
                  ) -> torch.Tensor:
    """Mean over frames of 1 - cosine(source embedding, frame embedding).

    frame_embeddings: N,dim global embeddings of decoded generated frames;
    f_gid_source broadcasts (dim,) or (N,dim).
    """
    cos = F.cosine_similarity(frame_embeddings,
                              f_gid_source.expand_as(frame_embeddings), dim=-1)
    return (1.0 - cos).mean()


def pretrain_identity_encoder(encoder: IdentityEncoder, n_identities: int,
                              steps: int = 600, batch: int = 48,
                              lr: float = 2e-3, size=(64, 64), seed: int = 0,
                              log_every: int = 0) -> list[float]:
    """Train the stand-in recognition model on codebook renders, with
    random pose/lighting/expression augmentation per sample."""
    from . import videodata as vd

    opt = torch.optim.AdamW(encoder.parameters(), lr=lr, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    losses = []
    for step in range(steps):
        rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
        labels = rng.integers(0, n_identities, size=batch)
        imgs = np.empty((batch, size[0], size[1], 3), dtype=np.float32)
        for i, lab in enumerate(labels):
            f = vd.SyntheticFactors(
                identity_id=int(lab),
                pose=float(rng.uniform(-1, 1)),
                lighting=float(rng.uniform(0, 1)),
                expression=float(rng.uniform(-1, 1)),
                makeup_marker=bool(rng.uniform() < 0.3))
            imgs[i] = vd.generate_synthetic_clip(f, frames=1, size=size).frames[0]
        x = torch.from_numpy(imgs).permute(0, 3, 1, 2)
        y = torch.from_numpy(labels.astype(np.int64))
        # two phases: linear-head warm-up, then the margin-softmax objective
        if step < (3 * steps) // 4:
            logits = encoder.linear_logits(x)
        else:
            logits = encoder.margin_logits(encoder.embed_global(x), y, margin=0.2)
        loss = F.cross_entropy(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.detach().item())
        if log_every and step % log_every == 0:
            print(f"idenc step {step}: ce {losses[-1]:.4f}")
    return losses


def save_identity_encoder(encoder: IdentityEncoder, path: str) -> None:
    arrays = {k: v.detach().numpy() for k, v in encoder.state_dict().items()}
    meta = {"dim": encoder.dim,
            "stage_channels": list(encoder.stage_channels),
            "n_classes": encoder.class_weights.shape[0]}
    ckpt.save_archive(path, arrays, meta)


def load_identity_encoder(path: str) -> IdentityEncoder:
    arrays, meta = ckpt.load_archive(path)
    enc = IdentityEncoder(dim=meta["dim"],
                          stage_channels=tuple(meta.get(
                              "stage_channels", (32, 64, 96, 128))),
                          n_classes=meta["n_classes"])
    enc.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    for p in enc.parameters():
        p.requires_grad_(False)
    enc.eval()
    return enc
