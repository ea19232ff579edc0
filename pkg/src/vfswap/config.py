"""Run configuration: a nested key tree with strict parsing and exact
round-tripping. Unknown keys are rejected; every run writes its fully
resolved config beside its outputs."""

import dataclasses
import typing

import yaml


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class DataConfig:
    n_clips: int = 64
    frames: int = 8
    height: int = 64
    width: int = 64
    n_identities: int = 256
    seed: int = 0


@dataclasses.dataclass
class CodecConfig:
    kind: str = "identity"       # identity | learned
    s: int = 4
    c: int = 8                   # learned codec only
    hidden: int = 48
    pretrain_steps: int = 800
    pretrain_lr: float = 2e-3


@dataclasses.dataclass
class PSigmaConfig:
    log_mean: float = -1.2
    log_std: float = 1.2


@dataclasses.dataclass
class EdmConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    steps: int = 25
    guidance_scale: float = 2.0
    p_sigma: PSigmaConfig = dataclasses.field(default_factory=PSigmaConfig)


@dataclasses.dataclass
class DenoiserModelConfig:
    base_channels: int = 48
    channel_mults: list = dataclasses.field(default_factory=lambda: [1, 2])
    heads: int = 4
    d_model: int = 128
    temporal_kernel: int = 3
    temporal_attn: bool = True


@dataclasses.dataclass
class FALModelConfig:
    channels: list = dataclasses.field(default_factory=lambda: [48, 96, 128])
    heads: int = 4
    lambda_attr: float = 10.0
    lambda_rec: float = 10.0
    lambda_tid: float = 1.0
    margin: float = 0.4
    r1_weight: float = 1.0
    pixel_space: bool = False    # w/o-latent ablation (FAL-only experiments)


@dataclasses.dataclass
class DILConfig:
    dim: int = 128
    positional: bool = True
    pretrain_steps: int = 600
    pretrain_lr: float = 2e-3


@dataclasses.dataclass
class TrainerConfig:
    lambda_fal: float = 1.0
    lambda_id: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 4
    warmup_steps: int = 500
    total_steps: int = 2000
    attr_drop_prob: float = 0.1
    token_drop_prob: float = 0.1
    freeze_fal_after_warmup: bool = False
    fal_only: bool = False       # warm-up-style run: attribute subsystem only
    checkpoint_every: int = 500

    def validate(self):
        for name in ("attr_drop_prob", "token_drop_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"train.{name} must be in [0,1], got {v}")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("train.warmup_steps must be <= train.total_steps")


@dataclasses.dataclass
class EvalConfig:
    n_pairs: int = 100
    n_fvd_clips: int = 32
    no_fal: bool = False


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    codec: CodecConfig = dataclasses.field(default_factory=CodecConfig)
    edm: EdmConfig = dataclasses.field(default_factory=EdmConfig)
    denoiser: DenoiserModelConfig = dataclasses.field(
        default_factory=DenoiserModelConfig)
    fal: FALModelConfig = dataclasses.field(default_factory=FALModelConfig)
    dil: DILConfig = dataclasses.field(default_factory=DILConfig)
    train: TrainerConfig = dataclasses.field(default_factory=TrainerConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)


def _from_dict(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"expected mapping at '{path or '<root>'}'")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) at '{path or '<root>'}': "
                          f"{sorted(unknown)}")
    kwargs = {}
    for name, val in d.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (
                isinstance(f.type, type) and dataclasses.is_dataclass(f.type)):
            kwargs[name] = _from_dict(f.type, val, sub)
        else:
            kwargs[name] = val
    return cls(**kwargs)


def from_dict(d: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, d, "")
    cfg.train.validate()
    return cfg


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load(path: str) -> RunConfig:
    with open(path) as fh:
        d = yaml.safe_load(fh) or {}
    return from_dict(d)


def save(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `a.b.c=value` overrides; values parsed as YAML scalars."""
    d = to_dict(cfg)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override '{ov}' is not of the form key=value")
        key, raw = ov.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node:
                raise ConfigError(f"unknown config key '{key}'")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{key}'")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(d)
