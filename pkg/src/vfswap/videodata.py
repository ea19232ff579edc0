"""Synthetic labeled face-video clips, disk ingestion, and inpainting inputs.

Clips render a procedural face whose appearance is a deterministic function
of labeled factors (identity, pose, lighting, expression, makeup marker),
so downstream disentanglement claims can be checked against ground truth.
"""

import dataclasses
import json
import os
from fractions import Fraction

import numpy as np
from PIL import Image

from .render_kernels import N_ID_PARAMS, render_frame

CODEBOOK_SEED = 2024
CODEBOOK_SIZE = 256
MASK_FILL = 0.0  # mid-gray of the [-1,1] range


class InvalidFactorError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class SyntheticFactors:
    identity_id: int
    pose: float = 0.0
    lighting: float = 0.0
    expression: float = 0.0
    makeup_marker: bool = False

    def validate(self, codebook_size: int = CODEBOOK_SIZE) -> None:
        if not 0 <= self.identity_id < codebook_size:
            raise InvalidFactorError(
                f"identity_id {self.identity_id} outside codebook [0, {codebook_size})")
        if not -1.0 <= self.pose <= 1.0:
            raise InvalidFactorError(f"pose {self.pose} outside [-1, 1]")
        if not 0.0 <= self.lighting <= 1.0:
            raise InvalidFactorError(f"lighting {self.lighting} outside [0, 1]")
        if not -1.0 <= self.expression <= 1.0:
            raise InvalidFactorError(f"expression {self.expression} outside [-1, 1]")


@dataclasses.dataclass
class VideoClip:
    frames: np.ndarray            # F,H,W,3 float32 in [-1,1]
    masks: np.ndarray | None      # F,H,W uint8 binary
    factors: list[SyntheticFactors] | None = None
    fps: Fraction = Fraction(25)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclasses.dataclass
class SourceFace:
    image: np.ndarray             # H,W,3 float32 in [-1,1]
    factors: SyntheticFactors | None = None


def identity_params(identity_id: int) -> np.ndarray:
    """Parameter vector of one codebook identity (geometry + colors)."""
    if not 0 <= identity_id < CODEBOOK_SIZE:
        raise InvalidFactorError(
            f"identity_id {identity_id} outside codebook [0, {CODEBOOK_SIZE})")
    rng = np.random.default_rng(np.random.SeedSequence([CODEBOOK_SEED, identity_id]))
    p = np.empty(N_ID_PARAMS, dtype=np.float64)
    p[0] = rng.uniform(0.45, 0.90)   # skin r
    p[1] = rng.uniform(0.45, 0.80)   # skin g
    p[2] = rng.uniform(0.30, 0.75)   # skin b
    p[3] = rng.uniform(0.25, 0.33)   # ax
    p[4] = rng.uniform(0.28, 0.40)   # ay
    p[5] = rng.uniform(0.09, 0.15)   # eye dx
    p[6] = rng.uniform(0.07, 0.13)   # eye dy
    p[7] = rng.uniform(0.030, 0.055)  # eye radius
    p[8] = rng.uniform(0.02, 0.30)   # eye shade
    p[9] = rng.uniform(0.17, 0.20)   # mouth half-width
    p[10] = rng.uniform(0.17, 0.20)  # mouth dy
    p[11] = rng.uniform(0.55, 0.70)  # mouth r
    p[12] = rng.uniform(0.05, 0.15)  # mouth g
    p[13] = rng.uniform(0.10, 0.20)  # mouth b
    return p


def generate_synthetic_clip(factors: SyntheticFactors,
                            motion: list[dict] | None = None,
                            frames: int = 16,
                            size: tuple[int, int] = (64, 64),
                            seed: int = 0) -> VideoClip:
    """Render a clip whose per-frame factors are `factors` plus `motion` deltas.

    `motion` is an optional list of per-frame dicts with keys among
    pose/lighting/expression (additive deltas) and makeup_marker (override).
    Rendering is a pure function of (factors, motion, size); `seed` is kept
    for interface stability and mixed into nothing.
    """
    if frames < 1:
        raise InvalidFactorError(f"frames must be >= 1, got {frames}")
    H, W = size
    if H < 16 or W < 16:
        raise InvalidFactorError(f"size must be at least 16x16, got {size}")
    factors.validate()
    params = identity_params(factors.identity_id)

    per_frame = []
    for i in range(frames):
        d = motion[i] if motion is not None else {}
        f = SyntheticFactors(
            identity_id=factors.identity_id,
            pose=factors.pose + d.get("pose", 0.0),
            lighting=factors.lighting + d.get("lighting", 0.0),
            expression=factors.expression + d.get("expression", 0.0),
            makeup_marker=bool(d.get("makeup_marker", factors.makeup_marker)),
        )
        f.validate()
        per_frame.append(f)

    frame_arr = np.empty((frames, H, W, 3), dtype=np.float32)
    mask_arr = np.empty((frames, H, W), dtype=np.uint8)
    for i, f in enumerate(per_frame):
        frame_arr[i], mask_arr[i] = render_frame(
            params, f.pose, f.lighting, f.expression,
            1.0 if f.makeup_marker else 0.0, (H, W))
    return VideoClip(frames=frame_arr, masks=mask_arr, factors=per_frame)


def random_clip(rng: np.random.Generator,
                frames: int = 16,
                size: tuple[int, int] = (64, 64),
                n_identities: int = CODEBOOK_SIZE,
                identity_id: int | None = None) -> VideoClip:
    """Draw a clip with random base factors and smooth random motion."""
    if identity_id is None:
        identity_id = int(rng.integers(0, n_identities))
    base = SyntheticFactors(
        identity_id=identity_id,
        pose=float(rng.uniform(-0.7, 0.7)),
        lighting=float(rng.uniform(0.0, 1.0)),
        expression=float(rng.uniform(-0.8, 0.8)),
        makeup_marker=bool(rng.uniform() < 0.3),
    )
    pose_vel = float(rng.uniform(-0.3, 0.3))
    expr_vel = float(rng.uniform(-0.2, 0.2))
    motion = []
    for i in range(frames):
        t = i / max(frames - 1, 1)
        dp = np.clip(base.pose + pose_vel * t, -1.0, 1.0) - base.pose
        de = np.clip(base.expression + expr_vel * t, -1.0, 1.0) - base.expression
        motion.append({"pose": float(dp), "expression": float(de)})
    return generate_synthetic_clip(base, motion=motion, frames=frames, size=size)


def sample_training_pair(dataset, rng: np.random.Generator):
    """Pick a clip and a uniformly chosen frame of it as the source face."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    clip = dataset[int(rng.integers(0, len(dataset)))]
    idx = int(rng.integers(0, clip.num_frames))
    factors = clip.factors[idx] if clip.factors is not None else None
    return clip, SourceFace(image=clip.frames[idx].copy(), factors=factors)


def mask_face_region(clip: VideoClip) -> VideoClip:
    """Replace face-region pixels by the mid-gray fill; background untouched."""
    if clip.masks is None:
        raise ValueError("clip has no masks")
    m = clip.masks[..., None].astype(np.float32)
    frames = clip.frames * (1.0 - m) + MASK_FILL * m
    return VideoClip(frames=frames.astype(np.float32), masks=clip.masks.copy(),
                     factors=clip.factors, fps=clip.fps)


# --- on-disk layout: frame_%05d.png + mask_%05d.png + factors.json ---

def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.floor((frames + 1.0) * 127.5 + 0.5).clip(0, 255).astype(np.uint8)


def from_uint8(pix: np.ndarray) -> np.ndarray:
    return (pix.astype(np.float32) / 127.5 - 1.0)


def save_clip(clip: VideoClip, clip_dir: str) -> None:
    os.makedirs(clip_dir, exist_ok=True)
    pix = to_uint8(clip.frames)
    for i in range(clip.num_frames):
        Image.fromarray(pix[i]).save(os.path.join(clip_dir, f"frame_{i:05d}.png"))
        if clip.masks is not None:
            Image.fromarray(clip.masks[i] * 255).save(
                os.path.join(clip_dir, f"mask_{i:05d}.png"))
    if clip.factors is not None:
        payload = {
            "identity_id": clip.factors[0].identity_id,
            "pose": [f.pose for f in clip.factors],
            "lighting": [f.lighting for f in clip.factors],
            "expression": [f.expression for f in clip.factors],
            "makeup_marker": [f.makeup_marker for f in clip.factors],
        }
        with open(os.path.join(clip_dir, "factors.json"), "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)


def load_clip(clip_dir: str) -> VideoClip:
    """Ingest a clip directory; no alignment is performed."""
    i = 0
    frames, masks = [], []
    while True:
        fpath = os.path.join(clip_dir, f"frame_{i:05d}.png")
        if not os.path.exists(fpath):
            break
        frames.append(from_uint8(np.asarray(Image.open(fpath))))
        mpath = os.path.join(clip_dir, f"mask_{i:05d}.png")
        if not os.path.exists(mpath):
            raise FileNotFoundError(f"missing mask file: {mpath}")
        masks.append((np.asarray(Image.open(mpath)) > 127).astype(np.uint8))
        i += 1
    if not frames:
        raise FileNotFoundError(f"no frame files in {clip_dir}")

    factors = None
    fpath = os.path.join(clip_dir, "factors.json")
    if os.path.exists(fpath):
        with open(fpath) as fh:
            d = json.load(fh)
        factors = [
            SyntheticFactors(identity_id=d["identity_id"], pose=d["pose"][k],
                             lighting=d["lighting"][k], expression=d["expression"][k],
                             makeup_marker=d["makeup_marker"][k])
            for k in range(len(frames))
        ]
        for f in factors:
            f.validate()
    return VideoClip(frames=np.stack(frames), masks=np.stack(masks), factors=factors)


class SyntheticDataset:
    """Deterministic, indexable set of random synthetic clips.

    Each item is generated from a seed derived from (seed, index), so
    iteration order and content are reproducible regardless of worker count.
    """

    def __init__(self, n_clips: int, frames: int = 16, size: tuple[int, int] = (64, 64),
                 n_identities: int = CODEBOOK_SIZE, seed: int = 0):
        self.n_clips = n_clips
        self.frames = frames
        self.size = size
        self.n_identities = n_identities
        self.seed = seed

    def __len__(self) -> int:
        return self.n_clips

    def __getitem__(self, idx: int) -> VideoClip:
        if not 0 <= idx < self.n_clips:
            raise IndexError(idx)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, idx]))
        return random_clip(rng, frames=self.frames, size=self.size,
                           n_identities=self.n_identities)
