"""EDM preconditioning, the denoising score matching objective, the
deterministic Heun sampler with classifier-free guidance, and overlapped
temporal co-denoising for long clips.

All operations are pure given explicit seeds. Tensors are torch with a
leading batch axis; `sigma` may be a scalar or a per-batch vector.
"""

import dataclasses
import math

import numpy as np
import torch


@dataclasses.dataclass(frozen=True)
class NoiseState:
    sigma: float
    sigma_data: float
    c_skip: float
    c_in: float
    c_out: float
    c_noise: float


@dataclasses.dataclass(frozen=True)
class SigmaDistribution:
    log_mean: float = -1.2
    log_std: float = 1.2

    def __post_init__(self):
        if self.log_std <= 0:
            raise ValueError(f"log_std must be positive, got {self.log_std}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.exp(rng.normal(self.log_mean, self.log_std, size=n))


@dataclasses.dataclass(frozen=True)
class SamplerSchedule:
    steps: int = 25
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    guidance_scale: float = 2.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.sigma_min < self.sigma_max:
            raise ValueError("sigma_min must be < sigma_max")

    def sigmas(self) -> np.ndarray:
        """Karras sigma ladder, descending, with a final 0 appended."""
        n = self.steps
        if n == 1:
            lad = np.array([self.sigma_max])
        else:
            i = np.arange(n) / (n - 1)
            lad = (self.sigma_max ** (1 / self.rho)
                   + i * (self.sigma_min ** (1 / self.rho)
                          - self.sigma_max ** (1 / self.rho))) ** self.rho
        return np.concatenate([lad, [0.0]])


def precondition(sigma: float, sigma_data: float) -> NoiseState:
    """EDM coefficient family for noise level sigma."""
    if sigma <= 0 or sigma_data <= 0:
        raise ValueError(f"sigma and sigma_data must be positive, "
                         f"got {sigma}, {sigma_data}")
    s2 = sigma * sigma + sigma_data * sigma_data
    return NoiseState(
        sigma=sigma,
        sigma_data=sigma_data,
        c_skip=sigma_data * sigma_data / s2,
        c_in=1.0 / math.sqrt(s2),
        c_out=sigma * sigma_data / math.sqrt(s2),
        c_noise=0.25 * math.log(sigma),
    )


def _bcast(sigma, x: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(sigma, dtype=x.dtype)
    if t.dim() == 0:
        t = t.expand(x.shape[0])
    return t.reshape(x.shape[0], *([1] * (x.dim() - 1)))


def denoise(raw_net, x_noisy: torch.Tensor, sigma, cond) -> torch.Tensor:
    """x0 estimate: c_skip*x + c_out*F(c_in*x; c_noise, cond)."""
    if not torch.isfinite(x_noisy).all():
        raise ValueError("non-finite values in noisy input")
    s = _bcast(sigma, x_noisy)
    sd = raw_net.sigma_data
    s2 = s * s + sd * sd
    c_skip = sd * sd / s2
    c_in = 1.0 / torch.sqrt(s2)
    c_out = s * sd / torch.sqrt(s2)
    c_noise = 0.25 * torch.log(s).reshape(x_noisy.shape[0])
    return c_skip * x_noisy + c_out * raw_net(c_in * x_noisy, c_noise, cond)


def dsm_loss(denoiser, x0: torch.Tensor, cond, sigma_dist: SigmaDistribution,
             rng: np.random.Generator) -> torch.Tensor:
    """Weighted denoising score matching loss, mean over elements.

    denoiser(x, sigma, cond) must return the x0 estimate; weighting is
    (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2 with sigma_data taken
    from the denoiser.
    """
    if not torch.isfinite(x0).all():
        raise ValueError("non-finite values in x0")
    B = x0.shape[0]
    sigma = sigma_dist.sample(rng, B)
    noise = rng.standard_normal(size=x0.shape)
    s = _bcast(torch.from_numpy(sigma).to(x0.dtype), x0)
    n = torch.from_numpy(noise).to(x0.dtype) * s
    sd = denoiser.sigma_data if hasattr(denoiser, "sigma_data") else None
    if sd is None:
        raise ValueError("denoiser must expose sigma_data")
    w = (s * s + sd * sd) / (s * sd) ** 2
    d = denoiser(x0 + n, torch.from_numpy(sigma).to(x0.dtype), cond)
    return torch.mean(w * (d - x0) ** 2)


def cfg_combine(pred_uncond: torch.Tensor, pred_cond: torch.Tensor,
                scale: float) -> torch.Tensor:
    if pred_uncond.shape != pred_cond.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_uncond.shape)} vs "
                         f"{tuple(pred_cond.shape)}")
    # Short-circuit the endpoints so scale=1 is bit-equal to the conditional
    # branch (and scale=0 to the unconditional one), not merely close.
    if scale == 1.0:
        return pred_cond
    if scale == 0.0:
        return pred_uncond
    return pred_uncond + scale * (pred_cond - pred_uncond)


def _heun_sample(d_fn, schedule: SamplerSchedule, init_noise: torch.Tensor
                 ) -> torch.Tensor:
    """Deterministic 2nd-order sampler over the Karras ladder.

    d_fn(x, sigma) returns the (guided) x0 prediction for the full tensor.
    """
    sigmas = schedule.sigmas()
    x = init_noise.clone()
    for i in range(len(sigmas) - 1):
        t, t_next = float(sigmas[i]), float(sigmas[i + 1])
        d = (x - d_fn(x, t)) / t
        x_next = x + (t_next - t) * d
        if t_next > 0:
            d2 = (x_next - d_fn(x_next, t_next)) / t_next
            x_next = x + (t_next - t) * 0.5 * (d + d2)
        x = x_next
    return x


def _guided(denoiser, cond, uncond, scale: float):
    def d_fn(x, sigma):
        pred_c = denoiser(x, sigma, cond)
        if uncond is None:
            return pred_c
        pred_u = denoiser(x, sigma, uncond)
        return cfg_combine(pred_u, pred_c, scale)
    return d_fn


def edm_sample(denoiser, cond, schedule: SamplerSchedule,
               init_noise: torch.Tensor, uncond=None) -> torch.Tensor:
    """Sample one clip. init_noise must already be at sigma_max scale.

    When `uncond` is given, classifier-free guidance combines the two
    branch predictions at every evaluation with schedule.guidance_scale.
    """
    return _heun_sample(_guided(denoiser, cond, uncond, schedule.guidance_scale),
                        schedule, init_noise)


def _window_starts(total: int, clip_len: int, stride: int) -> list[int]:
    starts = list(range(0, total - clip_len + 1, stride))
    if starts[-1] != total - clip_len:
        starts.append(total - clip_len)
    return starts


def temporal_codenoise(denoiser, cond_long, clip_len: int, overlap: int,
                       schedule: SamplerSchedule, seed: int | None = None,
                       init_noise: torch.Tensor | None = None,
                       uncond_long=None, frame_axis: int = 2) -> torch.Tensor:
    """Co-denoise a long clip through overlapping windows.

    Per sampler evaluation, each window's x0 prediction is computed and
    overlapped frames are averaged (uniform weights, ascending window
    order) before the shared ODE update. `cond_long` must support
    slice_frames(start, end); with a single full-length window the result
    is bit-identical to edm_sample.
    """
    total = cond_long.num_frames
    if total < clip_len:
        raise ValueError(f"total frames {total} < clip_len {clip_len}")
    if not 0 <= overlap < clip_len:
        raise ValueError(f"overlap must be in [0, clip_len), got {overlap}")
    if init_noise is None:
        if seed is None:
            raise ValueError("need seed or init_noise")
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        shape = cond_long.latent_shape()
        init_noise = torch.from_numpy(
            rng.standard_normal(size=shape).astype(np.float32)) * schedule.sigma_max

    starts = _window_starts(total, clip_len, clip_len - overlap)
    scale = schedule.guidance_scale

    def narrow(x, s):
        return x.narrow(frame_axis, s, clip_len)

    def d_fn(x, sigma):
        acc = torch.zeros_like(x)
        cnt = torch.zeros_like(x)
        for s in starts:
            cond_w = cond_long.slice_frames(s, s + clip_len)
            uncond_w = (uncond_long.slice_frames(s, s + clip_len)
                        if uncond_long is not None else None)
            pred = _guided(denoiser, cond_w, uncond_w, scale)(narrow(x, s), sigma)
            acc.narrow(frame_axis, s, clip_len).add_(pred)
            cnt.narrow(frame_axis, s, clip_len).add_(1.0)
        return acc / cnt
    return _heun_sample(d_fn, schedule, init_noise)
