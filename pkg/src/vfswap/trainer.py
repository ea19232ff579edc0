"""Joint training of the video denoiser, the attribute autoencoder and its
adversary, plus the end-to-end face-swap entry point.

Every stochastic choice at step t is drawn from a generator seeded by
(run_seed, t), so runs are reproducible and resume is exact.
"""

import dataclasses
import json
import os

import numpy as np
import torch

from . import checkpoint as ckpt
from . import config as cfg_mod
from . import dil, edm, fal
from . import videodata as vd
from .denoiser import ConditioningBundle, DenoiserConfig, EdmDenoiser, SpatioTemporalUNet


class NanAbortError(RuntimeError):
    """Raised when a non-finite value surfaces during training."""


@dataclasses.dataclass
class StepLog:
    step: int
    loss_dm: float
    loss_fal: float
    loss_id: float
    loss_dis: float
    r1: float
    total: float
    same_identity: bool
    mf_zero_frac: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def _seeds(base: int, n: int = 8) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(base).generate_state(n)]


@dataclasses.dataclass
class SwapModel:
    """All trainable and frozen pieces needed to swap a face."""

    cfg: cfg_mod.RunConfig
    codec: object
    id_encoder: dil.IdentityEncoder
    tokenizer: dil.DetailedIdentityTokenizer
    unet: SpatioTemporalUNet
    attr_enc: fal.AttributeEncoder
    attr_dec: fal.AttributeDecoder
    dis: fal.Discriminator

    @property
    def denoiser(self) -> EdmDenoiser:
        return EdmDenoiser(self.unet)

    def generator_modules(self) -> list[torch.nn.Module]:
        return [self.unet, self.tokenizer, self.attr_enc, self.attr_dec]

    def identity_tokens(self, images: torch.Tensor) -> torch.Tensor:
        """B,49,d tokens from B,3,H,W source images."""
        return self.tokenizer(self.id_encoder.features(images))

    def save(self, path: str, step: int = 0) -> None:
        arrays = {}
        for prefix, mod in self._named_modules():
            for k, v in mod.state_dict().items():
                arrays[f"{prefix}.{k}"] = v.detach().numpy()
        meta = {"config": cfg_mod.to_dict(self.cfg),
                "sigma_data": float(self.unet.sigma_data),
                "step": step}
        ckpt.save_archive(path, arrays, meta)

    def _named_modules(self):
        return [("unet", self.unet), ("tokenizer", self.tokenizer),
                ("fal.encoder", self.attr_enc), ("fal.decoder", self.attr_dec),
                ("fal.discriminator", self.dis)]

    def load_arrays(self, arrays: dict) -> None:
        for prefix, mod in self._named_modules():
            sd = {k[len(prefix) + 1:]: torch.from_numpy(v.copy())
                  for k, v in arrays.items() if k.startswith(prefix + ".")}
            mod.load_state_dict(sd)


def build_model(cfg: cfg_mod.RunConfig, codec, id_encoder) -> SwapModel:
    if codec.sigma_data is None:
        raise ValueError("codec.sigma_data unset; call compute_sigma_data first")
    s_unet, s_tok, s_enc, s_dec, s_dis = _seeds(cfg.seed, 5)
    latent_c = 3 if cfg.fal.pixel_space else codec.c
    fal_cfg = fal.FALConfig(latent_channels=latent_c,
                            channels=tuple(cfg.fal.channels),
                            heads=cfg.fal.heads, id_dim=cfg.dil.dim)
    den_cfg = DenoiserConfig(
        latent_channels=codec.c, attr_channels=cfg.fal.channels[0],
        base_channels=cfg.denoiser.base_channels,
        channel_mults=tuple(cfg.denoiser.channel_mults),
        heads=cfg.denoiser.heads, d_model=cfg.denoiser.d_model,
        frames=cfg.data.frames, emb_dim=cfg.denoiser.d_model,
        temporal_kernel=cfg.denoiser.temporal_kernel,
        temporal_attn=cfg.denoiser.temporal_attn)
    unet = SpatioTemporalUNet(den_cfg, seed=s_unet)
    unet.sigma_data = float(codec.sigma_data)
    did_ch = id_encoder.stages[-1][0].conv2.out_channels
    return SwapModel(
        cfg=cfg, codec=codec, id_encoder=id_encoder,
        tokenizer=dil.DetailedIdentityTokenizer(
            did_ch, cfg.denoiser.d_model, positional=cfg.dil.positional,
            seed=s_tok),
        unet=unet,
        attr_enc=fal.AttributeEncoder(fal_cfg, seed=s_enc),
        attr_dec=fal.AttributeDecoder(fal_cfg, seed=s_dec),
        dis=fal.Discriminator(fal_cfg, seed=s_dis))


def load_model(path: str, codec, id_encoder) -> tuple[SwapModel, int]:
    arrays, meta = ckpt.load_archive(path)
    cfg = cfg_mod.from_dict(meta["config"])
    model = build_model(cfg, codec, id_encoder)
    model.unet.sigma_data = meta["sigma_data"]
    model.load_arrays(arrays)
    return model, int(meta["step"])


def _clip_latent(codec, clip: vd.VideoClip) -> torch.Tensor:
    """c,F,h,w latent of one clip."""
    lat = codec.encode_array(clip.frames)           # F,h,w,c
    return torch.from_numpy(lat).permute(3, 0, 1, 2).contiguous()


def _frames_tensor(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)


class Trainer:
    def __init__(self, cfg: cfg_mod.RunConfig, dataset, model: SwapModel,
                 out_dir: str | None = None):
        self.cfg = cfg
        self.dataset = dataset
        self.model = model
        self.out_dir = out_dir or cfg.out_dir
        self.step = 0
        self.sigma_dist = edm.SigmaDistribution(cfg.edm.p_sigma.log_mean,
                                                cfg.edm.p_sigma.log_std)
        self.weights = fal.FALLossWeights(cfg.fal.lambda_attr, cfg.fal.lambda_rec,
                                          cfg.fal.lambda_tid, cfg.fal.margin)
        gen_params = [p for m in model.generator_modules() for p in m.parameters()]
        self.gen_opt = torch.optim.AdamW(gen_params, lr=cfg.train.learning_rate,
                                         weight_decay=0.0)
        self.dis_opt = torch.optim.AdamW(model.dis.parameters(),
                                         lr=cfg.train.learning_rate,
                                         weight_decay=0.0)
        self._latent_cache: dict[int, torch.Tensor] = {}
        self._masked_cache: dict[int, torch.Tensor] = {}
        self._clip_cache: dict[int, vd.VideoClip] = {}

    # --- data plumbing ---

    def _clip(self, idx: int) -> vd.VideoClip:
        if idx not in self._clip_cache:
            self._clip_cache[idx] = self.dataset[idx]
        return self._clip_cache[idx]

    def _latents(self, idx: int) -> tuple[torch.Tensor, torch.Tensor]:
        if idx not in self._latent_cache:
            clip = self._clip(idx)
            self._latent_cache[idx] = _clip_latent(self.model.codec, clip)
            self._masked_cache[idx] = _clip_latent(self.model.codec,
                                                   vd.mask_face_region(clip))
        return self._latent_cache[idx], self._masked_cache[idx]

    def _cross_source(self, rng, identity_id: int) -> vd.SourceFace:
        for _ in range(64):
            k = int(rng.integers(0, len(self.dataset)))
            clip = self._clip(k)
            if clip.factors[0].identity_id != identity_id:
                j = int(rng.integers(0, clip.num_frames))
                return vd.SourceFace(clip.frames[j].copy(), clip.factors[j])
        raise RuntimeError("could not find a cross-identity source")

    def _sample_batch(self, rng):
        B = self.cfg.train.batch_size
        # the policy coin is the first draw of the step so its empirical
        # rate can be audited without running network passes
        same_identity = bool(rng.uniform() < 0.5)
        idxs = [int(i) for i in rng.integers(0, len(self.dataset), size=B)]
        clips = [self._clip(i) for i in idxs]
        lat = torch.stack([self._latents(i)[0] for i in idxs])       # B,c,F,h,w
        masked = torch.stack([self._latents(i)[1] for i in idxs])
        # diffusion source: always a frame of the target clip itself, so the
        # denoising target is a true ground truth for the conditioned swap
        diff_src = []
        for clip in clips:
            j = int(rng.integers(0, clip.num_frames))
            diff_src.append(clip.frames[j])
        diff_src_t = _frames_tensor(np.stack(diff_src))
        if same_identity:
            fal_src_t = diff_src_t
        else:
            faces = [self._cross_source(rng, c.factors[0].identity_id)
                     for c in clips]
            fal_src_t = _frames_tensor(np.stack([f.image for f in faces]))
        return {"clips": clips, "lat": lat, "masked": masked,
                "diff_src": diff_src_t, "fal_src": fal_src_t,
                "same_identity": same_identity}

    # --- one optimization step ---

    def _fal_inputs(self, batch) -> torch.Tensor:
        """Frames-as-batch tensor the attribute autoencoder operates on."""
        if self.cfg.fal.pixel_space:
            return torch.cat([_frames_tensor(c.frames) for c in batch["clips"]])
        lat = batch["lat"]                                   # B,c,F,h,w
        B, c, Fr, h, w = lat.shape
        return lat.permute(0, 2, 1, 3, 4).reshape(B * Fr, c, h, w)

    def training_step(self, step: int) -> StepLog:
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step]))
        batch = self._sample_batch(rng)
        same = batch["same_identity"]
        B = cfg.train.batch_size
        Fr = cfg.data.frames
        fal_frozen = (cfg.train.freeze_fal_after_warmup
                      and step >= cfg.train.warmup_steps)

        with torch.no_grad():
            f_rid = self.model.id_encoder.embed_global(batch["fal_src"])  # B,dim
            f_src_diff = self.model.id_encoder.embed_global(batch["diff_src"])

        # --- attribute autoencoder + adversary ---
        v = self._fal_inputs(batch)
        f_rid_rep = f_rid.repeat_interleave(Fr, dim=0)
        zero = torch.zeros(())
        l_g = l_attr = l_tid = l_rec = l_fal = d_loss = r1 = zero
        if fal_frozen:
            with torch.no_grad():
                bundle = self.model.attr_enc(v)
        else:
            bundle = self.model.attr_enc(v)
            v_prime = self.model.attr_dec(bundle.f_attr, f_rid_rep)
            bundle_p = self.model.attr_enc(v_prime)
            l_attr = fal.attr_consistency_loss(bundle.f_attr, bundle_p.f_attr)
            l_rec = fal.reconstruction_loss(v_prime, v.detach(), same)
            if not same:
                pix_prime = self._decode_frames(v_prime)
                f_gid_prime = self.model.id_encoder.embed_global(pix_prime)
                with torch.no_grad():
                    f_gid_real = self.model.id_encoder.embed_global(
                        _frames_tensor(np.concatenate(
                            [c.frames for c in batch["clips"]])))
                l_tid = fal.triplet_identity_loss(
                    f_gid_prime, f_gid_real, f_rid_rep, self.weights.margin)
            l_g, d_loss, r1 = fal.adversarial_losses(
                self.model.dis, v.detach(), v_prime, same, cfg.fal.r1_weight)
            l_fal = fal.fal_total_loss(l_g, l_attr, l_tid, l_rec, self.weights)

        if cfg.train.fal_only:
            # warm-up-style run that trains only the attribute subsystem;
            # used by the disentanglement experiment
            total = cfg.train.lambda_fal * l_fal
            if not torch.isfinite(total):
                raise NanAbortError(f"non-finite FAL loss at step {step}")
            self.gen_opt.zero_grad()
            total.backward()
            if not fal_frozen:
                self.dis_opt.zero_grad()
                (d_loss + r1).backward()
                self.dis_opt.step()
            self.gen_opt.step()
            return StepLog(step=step, loss_dm=0.0, loss_fal=l_fal.item(),
                           loss_id=0.0, loss_dis=d_loss.item(), r1=r1.item(),
                           total=total.item(), same_identity=same,
                           mf_zero_frac=1.0)

        # --- diffusion objective ---
        tokens = self.model.identity_tokens(batch["diff_src"])       # B,49,d
        if step >= cfg.train.warmup_steps and cfg.train.token_drop_prob > 0:
            drop = torch.from_numpy(
                rng.uniform(size=B) < cfg.train.token_drop_prob)
            tokens = torch.where(drop[:, None, None],
                                 self.model.unet.null_tokens[None], tokens)

        if step < cfg.train.warmup_steps:
            frame_mask = torch.zeros(B, Fr)
        else:
            frame_mask = torch.from_numpy(
                (rng.uniform(size=(B, Fr))
                 >= cfg.train.attr_drop_prob).astype(np.float32))

        c1 = cfg.fal.channels[0]
        f_low = bundle.f_low                                  # B*F,c1,h,w
        f_low = f_low.reshape(B, Fr, c1, *f_low.shape[-2:]).permute(0, 2, 1, 3, 4)
        if cfg.fal.pixel_space:
            f_low = None    # resolution mismatch; ablation trains FAL only

        cond = ConditioningBundle(
            masked_target_latent=batch["masked"],
            identity_tokens=tokens, attribute_low=f_low, frame_mask=frame_mask)

        x0 = batch["lat"]
        sigma = self.sigma_dist.sample(rng, B)
        noise = rng.standard_normal(size=x0.shape).astype(np.float32)
        sigma_t = torch.from_numpy(sigma).to(x0.dtype)
        s = sigma_t.reshape(B, 1, 1, 1, 1)
        d = self.model.denoiser(x0 + torch.from_numpy(noise) * s, sigma_t, cond)
        if not torch.isfinite(d).all():
            raise NanAbortError(f"non-finite denoiser output at step {step}")
        sd = self.model.unet.sigma_data
        w = (s * s + sd * sd) / (s * sd) ** 2
        l_dm = torch.mean(w * (d - x0) ** 2)

        pix_hat = self._decode_frames(
            d.permute(0, 2, 1, 3, 4).reshape(B * Fr, *d.shape[1:2], *d.shape[3:]))
        f_hat = self.model.id_encoder.embed_global(pix_hat)
        l_id = dil.identity_loss(f_src_diff.repeat_interleave(Fr, dim=0), f_hat)

        total = l_dm + cfg.train.lambda_fal * l_fal + cfg.train.lambda_id * l_id
        if not torch.isfinite(total):
            raise NanAbortError(
                f"non-finite loss at step {step}: dm={float(l_dm):.4g} "
                f"fal={float(l_fal):.4g} id={float(l_id):.4g}")

        self.gen_opt.zero_grad()
        total.backward()
        if not fal_frozen:
            self.dis_opt.zero_grad()
            (d_loss + r1).backward()
            self.dis_opt.step()
        self.gen_opt.step()

        return StepLog(
            step=step, loss_dm=l_dm.item(), loss_fal=l_fal.item(),
            loss_id=l_id.item(), loss_dis=d_loss.item(), r1=r1.item(),
            total=total.item(), same_identity=same,
            mf_zero_frac=float(1.0 - frame_mask.mean()))

    def _decode_frames(self, latents: torch.Tensor) -> torch.Tensor:
        """Differentiable N,c,h,w latent -> N,3,H,W pixel decode."""
        if self.cfg.fal.pixel_space and latents.shape[1] == 3:
            return latents
        return self.model.codec.decode_torch(latents)

    # --- loop, logging, checkpoints ---

    def fit(self, total_steps: int | None = None, log_every: int = 0):
        total = total_steps if total_steps is not None else self.cfg.train.total_steps
        os.makedirs(self.out_dir, exist_ok=True)
        log_path = os.path.join(self.out_dir, "metrics.jsonl")
        logs = []
        with open(log_path, "a") as fh:
            while self.step < total:
                rec = self.training_step(self.step)
                fh.write(rec.to_json() + "\n")
                logs.append(rec)
                self.step += 1
                if log_every and self.step % log_every == 0:
                    print(f"step {rec.step}: dm {rec.loss_dm:.4f} "
                          f"fal {rec.loss_fal:.4f} id {rec.loss_id:.4f}")
                if (self.cfg.train.checkpoint_every
                        and self.step % self.cfg.train.checkpoint_every == 0
                        and self.step < total):
                    self.save_state(os.path.join(
                        self.out_dir, f"state_{self.step:06d}.ckpt"))
        self.model.save(os.path.join(self.out_dir, "model.ckpt"), step=self.step)
        return logs

    def save_state(self, path: str) -> None:
        arrays = {}
        for prefix, mod in self.model._named_modules():
            for k, v in mod.state_dict().items():
                arrays[f"model.{prefix}.{k}"] = v.detach().numpy()
        for name, opt in (("optg", self.gen_opt), ("optd", self.dis_opt)):
            for idx, st in opt.state_dict()["state"].items():
                for k, v in st.items():
                    arrays[f"{name}.{idx}.{k}"] = np.asarray(
                        v.detach().numpy() if torch.is_tensor(v) else v)
        ckpt.save_archive(path, arrays,
                          {"step": self.step, "config": cfg_mod.to_dict(self.cfg)})

    def load_state(self, path: str) -> None:
        arrays, meta = ckpt.load_archive(path)
        self.model.load_arrays({k[len("model."):]: v for k, v in arrays.items()
                                if k.startswith("model.")})
        for name, opt in (("optg", self.gen_opt), ("optd", self.dis_opt)):
            state = {}
            for k, v in arrays.items():
                if not k.startswith(name + "."):
                    continue
                _, idx, field = k.split(".", 2)
                t = torch.from_numpy(v.copy())
                state.setdefault(int(idx), {})[field] = t
            sd = opt.state_dict()
            sd["state"] = state
            opt.load_state_dict(sd)
        self.step = int(meta["step"])


# --- inference ---

def swap(model: SwapModel, source: vd.SourceFace, target: vd.VideoClip,
         seed: int = 0, use_fal: bool = True,
         overlap: int | None = None) -> vd.VideoClip:
    """Swap the source identity onto the target clip.

    Clips longer than the training window are handled by overlapped
    temporal co-denoising; the result is composited into the target
    background through the face masks.
    """
    cfg = model.cfg
    codec = model.codec
    clip_len = cfg.data.frames
    if target.num_frames < 1:
        raise ValueError("empty target clip")
    with torch.no_grad():
        lat = _clip_latent(codec, target)[None]                  # 1,c,F,h,w
        masked = _clip_latent(codec, vd.mask_face_region(target))[None]
        src = _frames_tensor(source.image[None])
        tokens = model.identity_tokens(src)

        f_low = None
        if use_fal and not cfg.fal.pixel_space:
            c, Fr, h, w = lat.shape[1:]
            frames_flat = lat[0].permute(1, 0, 2, 3)
            bundle = model.attr_enc(frames_flat)
            f_low = bundle.f_low[None].permute(0, 2, 1, 3, 4)    # 1,c1,F,h,w

        frame_mask = torch.ones(1, target.num_frames)
        cond = ConditioningBundle(masked, tokens, f_low, frame_mask)
        schedule = edm.SamplerSchedule(
            steps=cfg.edm.steps, sigma_min=cfg.edm.sigma_min,
            sigma_max=cfg.edm.sigma_max, rho=cfg.edm.rho,
            guidance_scale=cfg.edm.guidance_scale)
        uncond = cond.without_identity() if schedule.guidance_scale != 1.0 else None

        den = model.denoiser
        if target.num_frames <= clip_len:
            rng = np.random.default_rng(np.random.SeedSequence([seed]))
            init = torch.from_numpy(rng.standard_normal(
                size=tuple(lat.shape)).astype(np.float32)) * schedule.sigma_max
            out_lat = edm.edm_sample(den, cond, schedule, init, uncond=uncond)
        else:
            ov = overlap if overlap is not None else clip_len // 2
            out_lat = edm.temporal_codenoise(
                den, cond, clip_len, ov, schedule, seed=seed,
                uncond_long=uncond)

        dec = codec.decode_array(
            out_lat[0].permute(1, 2, 3, 0).numpy())              # F,H,W,3
    gen = np.clip(dec, -1.0, 1.0)
    if target.masks is not None:
        m = target.masks[..., None].astype(np.float32)
        gen = m * gen + (1.0 - m) * target.frames
    return vd.VideoClip(frames=gen.astype(np.float32),
                        masks=None if target.masks is None else target.masks.copy(),
                        fps=target.fps)
