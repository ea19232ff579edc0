"""Fine-grained attribute learning: attribute encoder, identity-fusing
decoder, discriminator, and the associated losses, all in latent space.

The encoder yields high-level attribute maps (last layer) plus low-level
maps (first layer) for additive injection into the denoiser. The decoder
re-renders the latent clip under a different global identity vector; the
discriminator scores real/fake with a 2-channel head (channel 0 for
same-identity decodes, channel 1 for cross-identity decodes).
"""

import dataclasses

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn_blocks import (CrossAttention, ResBlock2d, SelfAttention2d,
                        reset_parameters, torch_generator)


@dataclasses.dataclass
class AttributeBundle:
    f_attr: torch.Tensor     # N,C3,h3,w3 high-level features (frames as batch)
    f_low: torch.Tensor      # N,C1,h1,w1 low-level features at input resolution


@dataclasses.dataclass(frozen=True)
class FALLossWeights:
    lambda_attr: float = 10.0
    lambda_rec: float = 10.0
    lambda_tid: float = 1.0
    margin: float = 0.4

    def __post_init__(self):
        if min(self.lambda_attr, self.lambda_rec, self.lambda_tid, self.margin) < 0:
            raise ValueError("FAL loss weights must be non-negative")


@dataclasses.dataclass
class FALConfig:
    latent_channels: int = 48
    channels: tuple = (48, 96, 128)   # one entry per encoder layer
    heads: int = 4
    id_dim: int = 128


class _EncoderLayer(nn.Module):
    """Two residual blocks interleaved with two self-attention blocks."""

    def __init__(self, in_ch: int, out_ch: int, heads: int):
        super().__init__()
        self.res1 = ResBlock2d(in_ch, out_ch)
        self.attn1 = SelfAttention2d(out_ch, heads)
        self.res2 = ResBlock2d(out_ch, out_ch)
        self.attn2 = SelfAttention2d(out_ch, heads)

    def forward(self, x):
        return self.attn2(self.res2(self.attn1(self.res1(x))))


class AttributeEncoder(nn.Module):
    """Three-layer frame-local encoder; layers 2 and 3 halve resolution."""

    def __init__(self, cfg: FALConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        self.layer1 = _EncoderLayer(cfg.latent_channels, c1, cfg.heads)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.layer2 = _EncoderLayer(c1, c2, cfg.heads)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.layer3 = _EncoderLayer(c2, c3, cfg.heads)
        reset_parameters(self, torch_generator(seed))

    def forward(self, latent: torch.Tensor) -> AttributeBundle:
        """latent: N,c,h,w with frames flattened into the batch axis."""
        if latent.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected {self.cfg.latent_channels} latent channels, "
                             f"got {latent.shape[1]}")
        h1 = self.layer1(latent)
        h2 = self.layer2(self.down1(h1))
        h3 = self.layer3(self.down2(h2))
        return AttributeBundle(f_attr=h3, f_low=h1)


class _DecoderLayer(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, heads: int, id_dim: int | None):
        super().__init__()
        self.res1 = ResBlock2d(in_ch, out_ch)
        self.cross = CrossAttention(out_ch, id_dim, heads) if id_dim else None
        self.res2 = ResBlock2d(out_ch, out_ch)

    def forward(self, x, f_rid):
        x = self.res1(x)
        if self.cross is not None:
            N, C, H, W = x.shape
            t = x.reshape(N, C, H * W).transpose(1, 2)
            t = self.cross(t, f_rid[:, None, :])
            x = t.transpose(1, 2).reshape(N, C, H, W)
        return self.res2(x)


class AttributeDecoder(nn.Module):
    """Three-layer decoder; the first two layers merge the identity vector
    via cross-attention. Mirrors the encoder's resolutions."""

    def __init__(self, cfg: FALConfig, seed: int = 0):
        super().__init__()
        c1, c2, c3 = cfg.channels
        self.layer1 = _DecoderLayer(c3, c3, cfg.heads, cfg.id_dim)
        self.up1 = nn.Conv2d(c3, c2, 3, padding=1)
        self.layer2 = _DecoderLayer(c2, c2, cfg.heads, cfg.id_dim)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.layer3 = _DecoderLayer(c1, c1, cfg.heads, None)
        self.out = nn.Conv2d(c1, cfg.latent_channels, 3, padding=1)
        reset_parameters(self, torch_generator(seed))

    def forward(self, f_attr: torch.Tensor, f_rid: torch.Tensor) -> torch.Tensor:
        norms = f_rid.norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError("f_rid must be unit-norm")
        h = self.layer1(f_attr, f_rid)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.layer2(h, f_rid)
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.layer3(h, None)
        return self.out(h)


class Discriminator(nn.Module):
    """Encoder architecture with a final conv producing 2 channel logits."""

    def __init__(self, cfg: FALConfig, seed: int = 0):
        super().__init__()
        self.encoder = AttributeEncoder(cfg, seed=seed)
        self.head = nn.Conv2d(cfg.channels[-1], 2, 3, padding=1)
        reset_parameters(self.head, torch_generator(seed + 1))

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(latent).f_attr)


# --- losses ---

def attr_consistency_loss(f_attr: torch.Tensor, f_attr_prime: torch.Tensor
                          ) -> torch.Tensor:
    """Half mean squared difference between attribute feature maps."""
    if f_attr.shape != f_attr_prime.shape:
        raise ValueError(f"shape mismatch: {tuple(f_attr.shape)} vs "
                         f"{tuple(f_attr_prime.shape)}")
    return 0.5 * torch.mean((f_attr - f_attr_prime) ** 2)


def reconstruction_loss(v_prime: torch.Tensor, v: torch.Tensor,
                        same_identity: bool) -> torch.Tensor:
    """Half mean squared difference, active only for same-identity decodes."""
    if v_prime.shape != v.shape:
        raise ValueError(f"shape mismatch: {tuple(v_prime.shape)} vs "
                         f"{tuple(v.shape)}")
    if not same_identity:
        return torch.zeros((), dtype=v.dtype)
    return 0.5 * torch.mean((v_prime - v) ** 2)


def triplet_identity_loss(f_gid_prime: torch.Tensor, f_gid: torch.Tensor,
                          f_rid: torch.Tensor, margin: float = 0.4) -> torch.Tensor:
    """max(cos(f'_gid, f_gid) - cos(f'_gid, f_rid) + margin, 0), averaged
    over the batch. Caller guarantees the cross-identity gating."""
    for v in (f_gid_prime, f_gid, f_rid):
        if not (v.norm(dim=-1) > 0).all():
            raise ValueError("zero vector passed to triplet identity loss")
    cos_same = F.cosine_similarity(f_gid_prime, f_gid, dim=-1)
    cos_rid = F.cosine_similarity(f_gid_prime, f_rid, dim=-1)
    return torch.clamp(cos_same - cos_rid + margin, min=0.0).mean()


def adversarial_losses(dis: Discriminator, real: torch.Tensor,
                       fake: torch.Tensor, same_identity: bool,
                       r1_weight: float = 1.0):
    """Non-saturating logistic GAN losses with R1 penalty on real samples.

    Returns (g_loss, d_loss, r1_penalty); d_loss excludes the (weighted)
    penalty so callers can log the parts separately. Channel 0 scores
    same-identity decodes, channel 1 cross-identity decodes.
    """
    if real.shape != fake.shape:
        raise ValueError("real/fake shape mismatch")
    ch = 0 if same_identity else 1

    logits_fake_g = dis(fake)[:, ch]
    g_loss = F.softplus(-logits_fake_g).mean()

    logits_fake_d = dis(fake.detach())[:, ch]
    real_req = real.detach().requires_grad_(True)
    logits_real = dis(real_req)[:, ch]
    d_loss = F.softplus(logits_fake_d).mean() + F.softplus(-logits_real).mean()
    grad, = torch.autograd.grad(logits_real.sum(), real_req, create_graph=True)
    r1 = grad.reshape(grad.shape[0], -1).pow(2).sum(dim=1).mean() * r1_weight
    return g_loss, d_loss, r1


def fal_total_loss(l_adv: torch.Tensor, l_attr: torch.Tensor,
                   l_tid: torch.Tensor, l_rec: torch.Tensor,
                   weights: FALLossWeights = FALLossWeights()) -> torch.Tensor:
    """Adversarial term unweighted plus the three weighted parts."""
    return (l_adv + weights.lambda_attr * l_attr
            + weights.lambda_tid * l_tid + weights.lambda_rec * l_rec)
