"""Shared torch building blocks with seed-deterministic initialization."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return gen


def _uniform_(tensor: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=gen) * 2.0 - 1.0) * bound)


def reset_parameters(module: nn.Module, gen: torch.Generator) -> None:
    """Re-initialize conv/linear weights from a seeded generator (fan-in uniform)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.Linear)):
            fan_in = m.weight.shape[1] * math.prod(m.weight.shape[2:]) \
                if m.weight.dim() > 2 else m.weight.shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            _uniform_(m.weight, bound, gen)
            if m.bias is not None:
                _uniform_(m.bias, bound, gen)
        elif isinstance(m, (nn.GroupNorm, nn.LayerNorm)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        with torch.no_grad():
            p.zero_()
    return m


def group_norm(ch: int) -> nn.GroupNorm:
    g = min(8, ch)
    while ch % g:
        g -= 1
    return nn.GroupNorm(g, ch)


class ResBlock2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm1 = group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ResBlock3d(nn.Module):
    """3D-conv residual block with optional noise-level embedding."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int | None = None,
                 temporal_kernel: int = 3):
        super().__init__()
        kt = temporal_kernel
        pad = (kt // 2, 1, 1)
        self.norm1 = group_norm(in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, (kt, 3, 3), padding=pad)
        self.norm2 = group_norm(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, (kt, 3, 3), padding=pad)
        self.emb_proj = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb_proj is not None and emb is not None:
            h = h + self.emb_proj(emb)[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _attend(q, k, v, heads: int):
    """q: B,Nq,C; k,v: B,Nk,C -> B,Nq,C multi-head attention."""
    B, Nq, C = q.shape
    Nk = k.shape[1]
    hd = C // heads
    q = q.reshape(B, Nq, heads, hd).transpose(1, 2)
    k = k.reshape(B, Nk, heads, hd).transpose(1, 2)
    v = v.reshape(B, Nk, heads, hd).transpose(1, 2)
    att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
    out = att @ v
    return out.transpose(1, 2).reshape(B, Nq, C)


class SelfAttention(nn.Module):
    """Attention over the token axis of a B,N,C tensor (pre-norm, residual)."""

    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x):
        h = self.norm(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        return x + self.proj(_attend(q, k, v, self.heads))


class CrossAttention(nn.Module):
    """Queries from a B,N,C tensor, keys/values from a B,M,D context."""

    def __init__(self, ch: int, ctx_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(ch)
        self.to_q = nn.Linear(ch, ch)
        self.to_k = nn.Linear(ctx_dim, ch)
        self.to_v = nn.Linear(ctx_dim, ch)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x, ctx):
        q = self.to_q(self.norm(x))
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        return x + self.proj(_attend(q, k, v, self.heads))


class SelfAttention2d(nn.Module):
    """Per-frame spatial self-attention on N,C,H,W maps."""

    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        self.attn = SelfAttention(ch, heads)

    def forward(self, x):
        N, C, H, W = x.shape
        t = x.reshape(N, C, H * W).transpose(1, 2)
        t = self.attn(t)
        return t.transpose(1, 2).reshape(N, C, H, W)


def fourier_features(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos embedding of a scalar per batch element; x: (B,) -> (B,dim)."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half, dtype=x.dtype))
    ang = x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
