"""Pixel <-> latent codecs.

Two backends behind one interface: an exact space-to-depth "identity"
codec (default for tests, so diffusion math is checked without codec
error) and a small learned convolutional autoencoder (for experiments).
Both are frame-local. The noise-scale statistic sigma_data is the std of
encoded training latents and travels with the codec.
"""

import dataclasses
import math

import numpy as np

from . import checkpoint as ckpt
from .videodata import VideoClip


@dataclasses.dataclass
class LatentClip:
    data: np.ndarray     # F,h,w,c float32
    s: int               # spatial downsample factor
    c: int               # latent channel count

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for arrays in [-1,1] (peak-to-peak 2)."""
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(4.0 / mse)


class IdentityCodec:
    """Exactly invertible space-to-depth packing by factor s."""

    kind = "identity"

    def __init__(self, s: int = 4, image_channels: int = 3):
        self.s = s
        self.c = image_channels * s * s
        self.sigma_data = None

    def encode_clip(self, clip: VideoClip) -> LatentClip:
        return LatentClip(data=self.encode_array(clip.frames), s=self.s, c=self.c)

    def encode_array(self, frames: np.ndarray) -> np.ndarray:
        F, H, W, C = frames.shape
        s = self.s
        if H % s or W % s:
            raise ValueError(f"spatial dims {H}x{W} not divisible by s={s}")
        x = frames.reshape(F, H // s, s, W // s, s, C)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x.reshape(F, H // s, W // s, s * s * C))

    def decode_clip(self, latent: LatentClip) -> VideoClip:
        return VideoClip(frames=self.decode_array(latent.data), masks=None)

    def decode_array(self, data: np.ndarray) -> np.ndarray:
        F, h, w, cc = data.shape
        s = self.s
        if cc != self.c:
            raise ValueError(f"latent has {cc} channels, codec expects {self.c}")
        C = cc // (s * s)
        x = data.reshape(F, h, w, s, s, C)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x.reshape(F, h * s, w * s, C))

    def compute_sigma_data(self, dataset, n_clips: int | None = None) -> float:
        n = len(dataset) if n_clips is None else min(n_clips, len(dataset))
        vals = [self.encode_clip(dataset[i]).data for i in range(n)]
        self.sigma_data = float(np.concatenate([v.ravel() for v in vals]).std())
        return self.sigma_data

    def save(self, path: str) -> None:
        ckpt.save_archive(path, {}, {"kind": self.kind, "s": self.s, "c": self.c,
                                     "sigma_data": self.sigma_data})

    # torch bridge: identity codec as differentiable ops on F,c,h,w tensors
    def decode_torch(self, lat):
        """Differentiable decode of an F,c,h,w torch tensor to F,C,H,W pixels."""
        import torch
        F, cc, h, w = lat.shape
        s = self.s
        C = cc // (s * s)
        x = lat.reshape(F, s, s, C, h, w)
        x = x.permute(0, 3, 4, 1, 5, 2)          # F,C,h,s,w,s
        return x.reshape(F, C, h * s, w * s)

    def encode_torch(self, pix):
        import torch
        F, C, H, W = pix.shape
        s = self.s
        x = pix.reshape(F, C, H // s, s, W // s, s)
        x = x.permute(0, 3, 5, 1, 2, 4)          # F,s,s,C,h,w
        return x.reshape(F, s * s * C, H // s, W // s)


class LearnedCodec:
    """Small convolutional autoencoder; approximate inverse (PSNR > 30 dB)."""

    kind = "learned"

    def __init__(self, s: int = 4, c: int = 8, hidden: int = 48, seed: int = 0):
        import torch
        from . import nn_blocks

        if s & (s - 1):
            raise ValueError(f"learned codec requires power-of-two s, got {s}")
        self.s = s
        self.c = c
        self.hidden = hidden
        self.sigma_data = None
        n_down = int(math.log2(s))
        gen = nn_blocks.torch_generator(seed)

        enc = []
        ch = 3
        for _ in range(n_down):
            enc += [torch.nn.Conv2d(ch, hidden, 3, stride=2, padding=1), torch.nn.SiLU()]
            ch = hidden
        enc += [torch.nn.Conv2d(ch, c, 3, padding=1)]
        self.encoder = torch.nn.Sequential(*enc)

        dec = [torch.nn.Conv2d(c, hidden, 3, padding=1), torch.nn.SiLU()]
        for _ in range(n_down):
            dec += [torch.nn.Upsample(scale_factor=2, mode="nearest"),
                    torch.nn.Conv2d(hidden, hidden, 3, padding=1), torch.nn.SiLU()]
        dec += [torch.nn.Conv2d(hidden, 3, 3, padding=1)]
        self.decoder = torch.nn.Sequential(*dec)
        nn_blocks.reset_parameters(self.encoder, gen)
        nn_blocks.reset_parameters(self.decoder, gen)

    def _modules(self):
        return {"encoder": self.encoder, "decoder": self.decoder}

    def encode_clip(self, clip: VideoClip) -> LatentClip:
        return LatentClip(data=self.encode_array(clip.frames), s=self.s, c=self.c)

    def encode_array(self, frames: np.ndarray) -> np.ndarray:
        import torch
        F, H, W, C = frames.shape
        if H % self.s or W % self.s:
            raise ValueError(f"spatial dims {H}x{W} not divisible by s={self.s}")
        with torch.no_grad():
            x = torch.from_numpy(frames).permute(0, 3, 1, 2)
            z = self.encoder(x)
        return z.permute(0, 2, 3, 1).numpy()

    def decode_clip(self, latent: LatentClip) -> VideoClip:
        import torch
        if latent.data.shape[-1] != self.c:
            raise ValueError(
                f"latent has {latent.data.shape[-1]} channels, codec expects {self.c}")
        with torch.no_grad():
            z = torch.from_numpy(latent.data).permute(0, 3, 1, 2)
            x = self.decoder(z)
        return VideoClip(frames=x.permute(0, 2, 3, 1).numpy(), masks=None)

    def decode_torch(self, lat):
        return self.decoder(lat)

    def encode_torch(self, pix):
        return self.encoder(pix)

    def pretrain(self, dataset, steps: int = 800, batch_frames: int = 32,
                 lr: float = 2e-3, seed: int = 0, log_every: int = 0) -> list[float]:
        import torch
        params = list(self.encoder.parameters()) + list(self.decoder.parameters())
        opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
        losses = []
        for step in range(steps):
            rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
            idx = rng.integers(0, len(dataset), size=4)
            frames = np.concatenate([dataset[int(i)].frames for i in idx])
            pick = rng.permutation(len(frames))[:batch_frames]
            x = torch.from_numpy(frames[pick]).permute(0, 3, 1, 2)
            out = self.decoder(self.encoder(x))
            loss = torch.mean((out - x) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            if log_every and step % log_every == 0:
                print(f"codec step {step}: mse {float(loss):.5f}")
        return losses

    def compute_sigma_data(self, dataset, n_clips: int | None = None) -> float:
        n = len(dataset) if n_clips is None else min(n_clips, len(dataset))
        vals = [self.encode_clip(dataset[i]).data for i in range(n)]
        self.sigma_data = float(np.concatenate([v.ravel() for v in vals]).std())
        return self.sigma_data

    def save(self, path: str) -> None:
        arrays = {}
        for prefix, mod in self._modules().items():
            for k, v in mod.state_dict().items():
                arrays[f"{prefix}.{k}"] = v.detach().numpy()
        ckpt.save_archive(path, arrays, {"kind": self.kind, "s": self.s, "c": self.c,
                                         "hidden": self.hidden,
                                         "sigma_data": self.sigma_data})


def load_codec(path: str):
    import torch
    arrays, meta = ckpt.load_archive(path)
    if meta["kind"] == "identity":
        codec = IdentityCodec(s=meta["s"], image_channels=meta["c"] // (meta["s"] ** 2))
        codec.sigma_data = meta["sigma_data"]
        return codec
    codec = LearnedCodec(s=meta["s"], c=meta["c"], hidden=meta["hidden"])
    for prefix, mod in codec._modules().items():
        sd = {k[len(prefix) + 1:]: torch.from_numpy(v.copy())
              for k, v in arrays.items() if k.startswith(prefix + ".")}
        mod.load_state_dict(sd)
    codec.sigma_data = meta["sigma_data"]
    return codec
