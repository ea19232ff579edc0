"""Command-line driver: data synthesis, pretraining, training, swapping,
evaluation, and plot emission.

Exit codes: 0 success, 2 config error, 3 runtime abort (NaN), 4 I/O error.
"""

import functools
import json
import os
import sys

import click
import numpy as np

from . import __version__
from . import checkpoint as ckpt_mod
from . import config as cfg_mod
from . import dil, latentcodec, metrics
from . import trainer as trainer_mod
from . import videodata as vd

EXIT_CONFIG, EXIT_NAN, EXIT_IO = 2, 3, 4


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except cfg_mod.ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except trainer_mod.NanAbortError as e:
            click.echo(f"aborted: {e}", err=True)
            sys.exit(EXIT_NAN)
        except (OSError, FileNotFoundError) as e:
            click.echo(f"i/o error: {e}", err=True)
            sys.exit(EXIT_IO)
    return wrapper


def _load_cfg(config_path, overrides, out=None, seed=None) -> cfg_mod.RunConfig:
    cfg = cfg_mod.load(config_path) if config_path else cfg_mod.RunConfig()
    cfg = cfg_mod.apply_overrides(cfg, list(overrides))
    if out is not None:
        cfg.out_dir = out
    if seed is not None:
        cfg.seed = seed
    return cfg


def _write_resolved(cfg: cfg_mod.RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    cfg_mod.save(cfg, os.path.join(out_dir, "config.yaml"))
    with open(os.path.join(out_dir, "version.txt"), "w") as fh:
        fh.write(f"vfswap {__version__}\n")


def _common(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="YAML run config.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VAL",
                      help="Config override; flags win over the file.")(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Desk-scale video face swapping."""


@main.command("synth-data")
@_common
@click.option("--n", "n_clips", type=int, default=None, help="Clip count.")
@click.option("--frames", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True, help="Overwrite a non-empty directory.")
@_guard
def cmd_synth_data(config_path, overrides, n_clips, frames, seed, out, force):
    """Write N synthetic clips in the on-disk clip layout."""
    cfg = _load_cfg(config_path, overrides, out=out)
    if n_clips is not None:
        cfg.data.n_clips = n_clips
    if frames is not None:
        cfg.data.frames = frames
    if seed is not None:
        cfg.data.seed = seed
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise cfg_mod.ConfigError(
            f"output directory '{out}' is not empty (use --force)")
    ds = vd.SyntheticDataset(cfg.data.n_clips, frames=cfg.data.frames,
                             size=(cfg.data.height, cfg.data.width),
                             n_identities=cfg.data.n_identities,
                             seed=cfg.data.seed)
    for i in range(len(ds)):
        vd.save_clip(ds[i], os.path.join(out, f"clip_{i:04d}"))
    _write_resolved(cfg, out)
    click.echo(f"wrote {len(ds)} clips to {out}")


def _dataset(cfg: cfg_mod.RunConfig) -> vd.SyntheticDataset:
    return vd.SyntheticDataset(cfg.data.n_clips, frames=cfg.data.frames,
                               size=(cfg.data.height, cfg.data.width),
                               n_identities=cfg.data.n_identities,
                               seed=cfg.data.seed)


@main.command("pretrain-codec")
@_common
@click.option("--out", required=True, type=click.Path())
@_guard
def cmd_pretrain_codec(config_path, overrides, out):
    """Fit the latent codec statistics (and weights, if learned)."""
    cfg = _load_cfg(config_path, overrides, out=out)
    ds = _dataset(cfg)
    if cfg.codec.kind == "identity":
        codec = latentcodec.IdentityCodec(s=cfg.codec.s)
    elif cfg.codec.kind == "learned":
        codec = latentcodec.LearnedCodec(s=cfg.codec.s, c=cfg.codec.c,
                                         hidden=cfg.codec.hidden, seed=cfg.seed)
        codec.pretrain(ds, steps=cfg.codec.pretrain_steps,
                       lr=cfg.codec.pretrain_lr, seed=cfg.seed)
    else:
        raise cfg_mod.ConfigError(f"unknown codec kind '{cfg.codec.kind}'")
    codec.compute_sigma_data(ds)
    os.makedirs(out, exist_ok=True)
    codec.save(os.path.join(out, "codec.ckpt"))
    _write_resolved(cfg, out)
    click.echo(f"codec ready: kind={codec.kind} sigma_data={codec.sigma_data:.4f}")


@main.command("pretrain-idenc")
@_common
@click.option("--out", required=True, type=click.Path())
@_guard
def cmd_pretrain_idenc(config_path, overrides, out):
    """Pretrain the stand-in identity recognition encoder, then freeze it."""
    cfg = _load_cfg(config_path, overrides, out=out)
    enc = dil.IdentityEncoder(dim=cfg.dil.dim,
                              n_classes=cfg.data.n_identities, seed=cfg.seed)
    losses = dil.pretrain_identity_encoder(
        enc, cfg.data.n_identities, steps=cfg.dil.pretrain_steps,
        lr=cfg.dil.pretrain_lr, size=(cfg.data.height, cfg.data.width),
        seed=cfg.seed)
    os.makedirs(out, exist_ok=True)
    dil.save_identity_encoder(enc, os.path.join(out, "idenc.ckpt"))
    _write_resolved(cfg, out)
    click.echo(f"identity encoder trained; final ce {losses[-1]:.4f}")


def _load_artifacts(run_dir: str):
    codec = latentcodec.load_codec(os.path.join(run_dir, "codec.ckpt"))
    enc = dil.load_identity_encoder(os.path.join(run_dir, "idenc.ckpt"))
    return codec, enc


@main.command("train")
@_common
@click.option("--out", required=True, type=click.Path(),
              help="Run directory holding codec.ckpt and idenc.ckpt.")
@click.option("--resume", is_flag=True, help="Continue from the latest state.")
@_guard
def cmd_train(config_path, overrides, out, resume):
    """Jointly train denoiser, attribute autoencoder, and adversary."""
    cfg = _load_cfg(config_path, overrides, out=out)
    codec, enc = _load_artifacts(out)
    model = trainer_mod.build_model(cfg, codec, enc)
    tr = trainer_mod.Trainer(cfg, _dataset(cfg), model, out_dir=out)
    if resume:
        states = sorted(f for f in os.listdir(out)
                        if f.startswith("state_") and f.endswith(".ckpt"))
        if not states:
            raise FileNotFoundError(f"no state_*.ckpt in {out} to resume from")
        tr.load_state(os.path.join(out, states[-1]))
        click.echo(f"resumed from step {tr.step}")
    _write_resolved(cfg, out)
    tr.fit(log_every=max(1, cfg.train.total_steps // 20))
    click.echo(f"trained to step {tr.step}; model at {out}/model.ckpt")


def _load_source(path: str, frame: int) -> vd.SourceFace:
    if os.path.isdir(path):
        clip = vd.load_clip(path)
        f = clip.factors[frame] if clip.factors is not None else None
        return vd.SourceFace(clip.frames[frame].copy(), f)
    from PIL import Image
    img = vd.from_uint8(np.asarray(Image.open(path).convert("RGB")))
    return vd.SourceFace(img, None)


@main.command("swap")
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True),
              help="Run directory with model.ckpt, codec.ckpt, idenc.ckpt.")
@click.option("--source", "source_path", required=True, type=click.Path(exists=True),
              help="Source clip directory or a single image file.")
@click.option("--source-frame", type=int, default=0)
@click.option("--target", "target_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--no-fal", is_flag=True,
              help="Disable attribute injection at inference (M_f = 0).")
@_guard
def cmd_swap(model_dir, source_path, source_frame, target_path, out, seed, no_fal):
    """Swap the source identity onto the target clip."""
    codec, enc = _load_artifacts(model_dir)
    model_path = os.path.join(model_dir, "model.ckpt")
    model, step = trainer_mod.load_model(model_path, codec, enc)
    source = _load_source(source_path, source_frame)
    target = vd.load_clip(target_path)
    if target.num_frames > model.cfg.data.frames:
        click.echo(f"target has {target.num_frames} frames > training window "
                   f"{model.cfg.data.frames}: temporal co-denoising path")
    result = trainer_mod.swap(model, source, target, seed=seed,
                              use_fal=not no_fal)
    vd.save_clip(result, out)
    prov = {
        "model": model_path,
        "model_hash": ckpt_mod.file_hash(model_path),
        "model_step": step,
        "seed": seed,
        "no_fal": no_fal,
        "source": os.path.abspath(source_path),
        "source_frame": source_frame,
        "target": os.path.abspath(target_path),
        "schedule": cfg_mod.to_dict(model.cfg)["edm"],
        "version": __version__,
    }
    with open(os.path.join(out, "provenance.json"), "w") as fh:
        json.dump(prov, fh, indent=1, sort_keys=True)
    click.echo(f"wrote {result.num_frames} swapped frames to {out}")


def run_eval(model: trainer_mod.SwapModel, enc, out: str,
             no_fal: bool = False, regressor=None) -> metrics.EvalReport:
    """Swap over held-out pairs and compute the full metric battery."""
    cfg = model.cfg
    n = cfg.eval.n_pairs
    size = (cfg.data.height, cfg.data.width)
    held = vd.SyntheticDataset(max(n, cfg.eval.n_fvd_clips),
                               frames=cfg.data.frames, size=size,
                               n_identities=cfg.data.n_identities,
                               seed=cfg.data.seed + 7919)
    results, targets, src_embs, src_ids = [], [], [], []
    for k in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 555, k]))
        target = held[k]
        tgt_id = target.factors[0].identity_id
        while True:
            sid = int(rng.integers(0, cfg.data.n_identities))
            if sid != tgt_id:
                break
        sf = vd.SyntheticFactors(sid, float(rng.uniform(-0.5, 0.5)),
                                 float(rng.uniform(0.2, 0.8)),
                                 float(rng.uniform(-0.5, 0.5)))
        src_img = vd.generate_synthetic_clip(sf, frames=1, size=size).frames[0]
        source = vd.SourceFace(src_img, sf)
        swapped = trainer_mod.swap(model, source, target, seed=k,
                                   use_fal=not no_fal)
        results.append((swapped, sid))
        targets.append(target)
        src_embs.append(metrics.clip_embedding(
            enc, vd.VideoClip(src_img[None], None)))
        src_ids.append(sid)

    gallery = metrics.build_gallery(enc, sorted(set(src_ids)),
                                    seed=cfg.seed, size=size)
    if regressor is None:
        regressor = metrics.train_factor_regressor(size=size, seed=cfg.seed)
    report = metrics.EvalReport(
        idr=metrics.id_retrieval(results, gallery, enc),
        ids=metrics.id_similarity(results, src_embs, enc),
        attr_errors=metrics.attribute_errors(results, targets, regressor),
        vidd=float(np.mean([metrics.vidd(r, enc) for r, _ in results])),
        fvd=metrics.fvd([held[k] for k in range(cfg.eval.n_fvd_clips)],
                        [r for r, _ in results[:cfg.eval.n_fvd_clips]],
                        metrics.VideoFeatureExtractor()),
        n_samples=n)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    _emit_eval_plots(report, results, enc, out)
    return report


def _emit_eval_plots(report, results, enc, out: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import torch
    import torch.nn.functional as F

    fig, ax = plt.subplots(figsize=(5, 3))
    names = ["idr", "ids", "vidd", "fvd"] + [f"err_{k}" for k in report.attr_errors]
    vals = [report.idr, report.ids, report.vidd, report.fvd,
            *report.attr_errors.values()]
    ax.bar(names, vals)
    ax.set_title("evaluation metrics")
    plt.xticks(rotation=45, ha="right")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "metric_bars.png"))
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3))
    for clip, _ in results[:8]:
        e = torch.from_numpy(np.stack(
            [metrics.clip_embedding(enc, vd.VideoClip(f[None], None))
             for f in clip.frames]))
        trace = (1.0 - F.cosine_similarity(e[:-1], e[1:], dim=-1)).numpy()
        ax.plot(trace, alpha=0.6)
    ax.set_xlabel("frame pair")
    ax.set_ylabel("1 - cos identity")
    ax.set_title("per-frame identity flicker")
    fig.tight_layout()
    fig.savefig(os.path.join(out, "vidd_trace.png"))
    plt.close(fig)


@main.command("eval")
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--no-fal", is_flag=True)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VAL")
@_guard
def cmd_eval(model_dir, out, no_fal, overrides):
    """Evaluate a trained model on held-out synthetic pairs."""
    codec, enc = _load_artifacts(model_dir)
    model, _ = trainer_mod.load_model(os.path.join(model_dir, "model.ckpt"),
                                      codec, enc)
    if overrides:
        model.cfg = cfg_mod.apply_overrides(model.cfg, list(overrides))
    report = run_eval(model, enc, out, no_fal=no_fal)
    _write_resolved(model.cfg, out)
    click.echo(json.dumps(report.to_dict(), sort_keys=True))


@main.command("plot")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True),
              help="Run directory containing metrics.jsonl.")
@click.option("--out", type=click.Path(), default=None)
@_guard
def cmd_plot(run_dir, out):
    """Emit loss-curve figures from a training metrics log."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    log_path = os.path.join(run_dir, "metrics.jsonl")
    records = []
    with open(log_path) as fh:
        for line in fh:
            records.append(json.loads(line))
    if not records:
        raise cfg_mod.ConfigError(f"no records in {log_path}")
    out = out or run_dir
    os.makedirs(out, exist_ok=True)
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("loss_dm", "loss_fal", "loss_id", "loss_dis"):
        ax.plot(steps, [r[key] for r in records], label=key, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out, "loss_curves.png")
    fig.savefig(path)
    plt.close(fig)
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
