"""Trainable spatio-temporal UNet over latent clips.

Per resolution stage: 3D-conv residual block, per-frame self-attention,
cross-attention over 49 identity tokens, temporal attention (with the
tokens appended as extra keys/values on the time axis). Low-level
attribute maps enter additively at the stem, gated per frame by a binary
mask, through a bias-free projection so a zero mask or zero features both
kill the injection exactly.

Tensor layout is B,C,F,H,W.
"""

import dataclasses

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import edm
from .nn_blocks import (CrossAttention, ResBlock3d, SelfAttention,
                        SelfAttention2d, fourier_features, group_norm,
                        reset_parameters, torch_generator, zero_module)

NUM_ID_TOKENS = 49


@dataclasses.dataclass
class DenoiserConfig:
    latent_channels: int = 48
    attr_channels: int = 48
    base_channels: int = 48
    channel_mults: tuple = (1, 2)
    heads: int = 4
    d_model: int = 128
    frames: int = 8
    emb_dim: int = 128
    temporal_kernel: int = 3
    temporal_attn: bool = True

    def __post_init__(self):
        for ch in [self.base_channels * m for m in self.channel_mults]:
            if ch % self.heads:
                raise ValueError("stage channels must be divisible by head count")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by head count")


@dataclasses.dataclass
class ConditioningBundle:
    masked_target_latent: torch.Tensor          # B,c,F,h,w
    identity_tokens: torch.Tensor | None        # B,49,d_model; None = null branch
    attribute_low: torch.Tensor | None          # B,ca,F,h,w; None = zeros
    frame_mask: torch.Tensor                    # B,F in {0,1}

    @property
    def num_frames(self) -> int:
        return self.masked_target_latent.shape[2]

    def latent_shape(self) -> tuple:
        return tuple(self.masked_target_latent.shape)

    def slice_frames(self, start: int, end: int) -> "ConditioningBundle":
        return ConditioningBundle(
            masked_target_latent=self.masked_target_latent[:, :, start:end],
            identity_tokens=self.identity_tokens,
            attribute_low=(self.attribute_low[:, :, start:end]
                           if self.attribute_low is not None else None),
            frame_mask=self.frame_mask[:, start:end],
        )

    def without_identity(self) -> "ConditioningBundle":
        return dataclasses.replace(self, identity_tokens=None)


class TemporalAttention(nn.Module):
    """Attention along the frame axis at each spatial cell; identity tokens
    are appended as extra keys/values."""

    def __init__(self, ch: int, d_model: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(ch)
        self.to_q = nn.Linear(ch, ch)
        self.to_kv = nn.Linear(ch, 2 * ch)
        self.tok_kv = nn.Linear(d_model, 2 * ch)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x, tokens):
        B, C, Fr, H, W = x.shape
        t = x.permute(0, 3, 4, 2, 1).reshape(B * H * W, Fr, C)
        h = self.norm(t)
        q = self.to_q(h)
        k, v = self.to_kv(h).chunk(2, dim=-1)
        if tokens is not None:
            tk, tv = self.tok_kv(tokens).chunk(2, dim=-1)      # B,49,C
            n_tok = tk.shape[1]
            tk = tk[:, None].expand(B, H * W, n_tok, C).reshape(B * H * W, n_tok, C)
            tv = tv[:, None].expand(B, H * W, n_tok, C).reshape(B * H * W, n_tok, C)
            k = torch.cat([k, tk], dim=1)
            v = torch.cat([v, tv], dim=1)
        from .nn_blocks import _attend
        t = t + self.proj(_attend(q, k, v, self.heads))
        return t.reshape(B, H, W, Fr, C).permute(0, 4, 3, 1, 2)


class StageAttention(nn.Module):
    """Per-frame self-attention, identity cross-attention, temporal attention."""

    def __init__(self, ch: int, cfg: DenoiserConfig):
        super().__init__()
        self.spatial = SelfAttention2d(ch, cfg.heads)
        self.cross = CrossAttention(ch, cfg.d_model, cfg.heads)
        self.temporal = (TemporalAttention(ch, cfg.d_model, cfg.heads)
                         if cfg.temporal_attn else None)

    def forward(self, x, tokens):
        B, C, Fr, H, W = x.shape
        flat = x.permute(0, 2, 1, 3, 4).reshape(B * Fr, C, H, W)
        flat = self.spatial(flat)
        t = flat.reshape(B * Fr, C, H * W).transpose(1, 2)
        ctx = tokens[:, None].expand(B, Fr, *tokens.shape[1:]) \
                             .reshape(B * Fr, *tokens.shape[1:])
        t = self.cross(t, ctx)
        flat = t.transpose(1, 2).reshape(B * Fr, C, H, W)
        x = flat.reshape(B, Fr, C, H, W).permute(0, 2, 1, 3, 4)
        if self.temporal is not None:
            x = self.temporal(x, tokens)
        return x


class SpatioTemporalUNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.sigma_data = 0.5   # overwritten from the codec statistic
        c, base = cfg.latent_channels, cfg.base_channels
        chans = [base * m for m in cfg.channel_mults]
        kt = cfg.temporal_kernel

        self.stem = nn.Conv3d(2 * c, base, (1, 3, 3), padding=(0, 1, 1))
        self.inj_proj = nn.Conv3d(cfg.attr_channels, base, 1, bias=False)
        self.null_tokens = nn.Parameter(torch.zeros(NUM_ID_TOKENS, cfg.d_model))
        self.emb_mlp = nn.Sequential(nn.Linear(cfg.emb_dim, cfg.emb_dim), nn.SiLU(),
                                     nn.Linear(cfg.emb_dim, cfg.emb_dim))

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = base
        for i, ch in enumerate(chans):
            self.down_blocks.append(ResBlock3d(prev, ch, cfg.emb_dim, kt))
            self.down_attn.append(StageAttention(ch, cfg))
            if i < len(chans) - 1:
                self.downsample.append(
                    nn.Conv3d(ch, ch, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)))
            prev = ch

        self.mid_block1 = ResBlock3d(prev, prev, cfg.emb_dim, kt)
        self.mid_attn = StageAttention(prev, cfg)
        self.mid_block2 = ResBlock3d(prev, prev, cfg.emb_dim, kt)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, ch in reversed(list(enumerate(chans))):
            self.up_blocks.append(ResBlock3d(prev + ch, ch, cfg.emb_dim, kt))
            self.up_attn.append(StageAttention(ch, cfg))
            prev = ch
            if i > 0:
                self.upsample.append(
                    nn.Conv3d(ch, chans[i - 1], (1, 3, 3), padding=(0, 1, 1)))
                prev = chans[i - 1]

        self.out_norm = group_norm(base)
        self.out_conv = zero_module(nn.Conv3d(base, c, (1, 3, 3), padding=(0, 1, 1)))

        gen = torch_generator(seed)
        reset_parameters(self, gen)
        with torch.no_grad():
            self.null_tokens.copy_(torch.randn(self.null_tokens.shape,
                                               generator=gen) * 0.02)
        zero_module(self.out_conv)

    def tokens_for(self, cond: ConditioningBundle, batch: int) -> torch.Tensor:
        if cond.identity_tokens is None:
            return self.null_tokens[None].expand(batch, *self.null_tokens.shape)
        if cond.identity_tokens.shape[1] != NUM_ID_TOKENS:
            raise ValueError(f"expected {NUM_ID_TOKENS} identity tokens, got "
                             f"{cond.identity_tokens.shape[1]}")
        return cond.identity_tokens

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor,
                cond: ConditioningBundle) -> torch.Tensor:
        B, C, Fr, H, W = x.shape
        if cond.frame_mask.shape[-1] != Fr:
            raise ValueError(f"frame_mask length {cond.frame_mask.shape[-1]} "
                             f"!= frame count {Fr}")
        tokens = self.tokens_for(cond, B)
        emb = self.emb_mlp(fourier_features(c_noise.reshape(B), self.cfg.emb_dim))

        h = self.stem(torch.cat([x, cond.masked_target_latent], dim=1))
        if cond.attribute_low is not None:
            gate = cond.frame_mask.reshape(B, 1, Fr, 1, 1).to(h.dtype)
            h = h + self.inj_proj(cond.attribute_low) * gate

        skips = []
        for i in range(len(self.down_blocks)):
            h = self.down_blocks[i](h, emb)
            h = self.down_attn[i](h, tokens)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)

        h = self.mid_block1(h, emb)
        h = self.mid_attn(h, tokens)
        h = self.mid_block2(h, emb)

        for i in range(len(self.up_blocks)):
            skip = skips.pop()
            h = self.up_blocks[i](torch.cat([h, skip], dim=1), emb)
            h = self.up_attn[i](h, tokens)
            if i < len(self.upsample):
                h = F.interpolate(h.permute(0, 2, 1, 3, 4).flatten(0, 1),
                                  scale_factor=2, mode="nearest")
                h = h.reshape(B, Fr, *h.shape[1:]).permute(0, 2, 1, 3, 4)
                h = self.upsample[i](h)

        return self.out_conv(F.silu(self.out_norm(h)))


class EdmDenoiser:
    """Callable x0-predicting denoiser wrapping the raw network."""

    def __init__(self, net: SpatioTemporalUNet):
        self.net = net

    @property
    def sigma_data(self) -> float:
        return self.net.sigma_data

    def __call__(self, x, sigma, cond):
        return edm.denoise(self.net, x, sigma, cond)
