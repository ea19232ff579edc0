import numpy as np
import pytest
import torch

from vfswap import metrics
from vfswap import videodata as vd


class StubEncoder:
    """Deterministic cheap embedding: random projection of mean colors.

    Metric properties (chance levels, invariances) must hold for any
    encoder, so tests that need thousands of embeddings use this stub.
    """

    def __init__(self, dim=16, seed=0):
        rng = np.random.default_rng(seed)
        self.w = torch.from_numpy(
            rng.standard_normal((27, dim)).astype(np.float32))

    def embed_global(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.nn.functional.adaptive_avg_pool2d(x, 3).flatten(1)
        e = pooled @ self.w
        return e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class FixedEncoder:
    """Maps each frame to a preset embedding via its first pixel value."""

    def __init__(self, table):
        self.table = {k: torch.tensor(v, dtype=torch.float32)
                      for k, v in table.items()}

    def embed_global(self, x: torch.Tensor) -> torch.Tensor:
        keys = x[:, 0, 0, 0]
        return torch.stack([self.table[round(float(k))] for k in keys])


def _clip_with_keys(keys, hw=8):
    frames = np.zeros((len(keys), hw, hw, 3), np.float32)
    for i, k in enumerate(keys):
        frames[i] += k
    return vd.VideoClip(frames=frames, masks=None)


# --- vidd ---

def test_vidd_static_clip_is_zero():
    enc = StubEncoder()
    clip = _clip_with_keys([0.3] * 5)
    clip.frames[:] = clip.frames[0]
    assert metrics.vidd(clip, enc) <= 1e-9


def test_vidd_alternating_orthogonal_is_one():
    enc = FixedEncoder({0: [1.0, 0.0], 1: [0.0, 1.0]})
    clip = _clip_with_keys([0, 1, 0, 1])
    assert metrics.vidd(clip, enc) == pytest.approx(1.0, abs=1e-6)


def test_vidd_requires_two_frames():
    with pytest.raises(ValueError):
        metrics.vidd(_clip_with_keys([0.5]), StubEncoder())


def test_vidd_invariant_under_frame_reversal():
    enc = StubEncoder()
    clip = vd.random_clip(np.random.default_rng(1), frames=6, size=(32, 32))
    rev = vd.VideoClip(frames=clip.frames[::-1].copy(), masks=None)
    assert metrics.vidd(clip, enc) == pytest.approx(
        metrics.vidd(rev, enc), abs=1e-9)


def test_vidd_smooth_motion_below_shuffled():
    enc = StubEncoder()
    clip = vd.random_clip(np.random.default_rng(2), frames=12, size=(32, 32))
    rng = np.random.default_rng(3)
    shuf = vd.VideoClip(frames=clip.frames[rng.permutation(12)].copy(),
                        masks=None)
    assert metrics.vidd(clip, enc) < metrics.vidd(shuf, enc)


# --- retrieval / similarity ---

def test_id_retrieval_single_identity_gallery(idenc):
    clip = vd.generate_synthetic_clip(vd.SyntheticFactors(4), frames=2,
                                      size=(64, 64))
    gallery = metrics.build_gallery(idenc, [4], n_views=2)
    assert metrics.id_retrieval([(clip, 4)], gallery, idenc) == 1.0


def test_id_retrieval_true_renders_hit(idenc):
    ids = [3, 9, 27, 50]
    gallery = metrics.build_gallery(idenc, ids, n_views=4)
    results = [(vd.generate_synthetic_clip(
        vd.SyntheticFactors(i, pose=0.2, lighting=0.6), frames=2,
        size=(64, 64)), i) for i in ids]
    assert metrics.id_retrieval(results, gallery, idenc) == 1.0


def test_id_retrieval_gallery_permutation_invariant():
    enc = StubEncoder()
    rng = np.random.default_rng(4)
    ids = [0, 1, 2, 3, 4]
    gallery = {i: (lambda v: v / np.linalg.norm(v))(
        rng.standard_normal(16).astype(np.float32)) for i in ids}
    results = [(_clip_with_keys([rng.uniform(-1, 1)] * 2), i) for i in ids]
    a = metrics.id_retrieval(results, gallery, enc)
    shuffled = {i: gallery[i] for i in reversed(ids)}
    assert a == metrics.id_retrieval(results, shuffled, enc)


def test_id_retrieval_validation():
    enc = StubEncoder()
    with pytest.raises(ValueError):
        metrics.id_retrieval([], {0: np.ones(16, np.float32)}, enc)
    clip = _clip_with_keys([0.5, 0.5])
    with pytest.raises(ValueError):
        metrics.id_retrieval([(clip, 7)], {0: np.ones(16, np.float32)}, enc)


def test_id_retrieval_chance_level_for_random_inputs():
    """Random clips against an N-identity gallery retrieve at 1/N (+-3 sigma
    over 1k trials)."""
    enc = StubEncoder(seed=5)
    rng = np.random.default_rng(6)
    n_ids, trials = 8, 1000
    gallery = {}
    for i in range(n_ids):
        v = rng.standard_normal(16).astype(np.float32)
        gallery[i] = v / np.linalg.norm(v)
    hits = 0
    for _ in range(trials):
        frames = rng.standard_normal((1, 8, 8, 3)).astype(np.float32)
        clip = vd.VideoClip(frames=frames, masks=None)
        tgt = int(rng.integers(0, n_ids))
        hits += int(metrics.id_retrieval([(clip, tgt)], gallery, enc) == 1.0)
    p = 1.0 / n_ids
    sigma = (p * (1 - p) / trials) ** 0.5
    assert abs(hits / trials - p) <= 3 * sigma


def test_id_similarity_is_mean_cosine():
    enc = FixedEncoder({0: [1.0, 0.0], 1: [0.0, 1.0]})
    results = [(_clip_with_keys([0]), 0), (_clip_with_keys([1]), 1)]
    srcs = [np.array([1.0, 0.0], np.float32), np.array([1.0, 0.0], np.float32)]
    assert metrics.id_similarity(results, srcs, enc) == pytest.approx(0.5)


# --- attribute errors ---

@pytest.fixture(scope="module")
def regressor(cache_dir):
    path = cache_dir / "regressor.ckpt"
    if not path.exists():
        reg = metrics.train_factor_regressor(steps=400, seed=0)
        metrics.save_regressor(reg, str(path))
    return metrics.load_regressor(str(path))


def _held_out_clips(n, rng, frames=2):
    return [vd.random_clip(rng, frames=frames, size=(64, 64)) for _ in range(n)]


def test_attribute_errors_self_targets_near_zero(regressor):
    rng = np.random.default_rng(7)
    targets = _held_out_clips(8, rng)
    results = [(c, 0) for c in targets]
    errs = metrics.attribute_errors(results, targets, regressor)
    assert set(errs) == {"pose", "lighting", "expression"}
    for v in errs.values():
        assert 0.0 <= v < 0.15     # regressor intrinsic error


def test_attribute_errors_detect_pose_shift(regressor):
    rng = np.random.default_rng(8)
    base = [vd.SyntheticFactors(int(rng.integers(0, 256)),
                                float(rng.uniform(-0.4, 0.0)),
                                float(rng.uniform(0.2, 0.8)),
                                float(rng.uniform(-0.5, 0.5)))
            for _ in range(8)]
    targets = [vd.generate_synthetic_clip(f, frames=1) for f in base]
    shifted = [vd.generate_synthetic_clip(
        vd.SyntheticFactors(f.identity_id, f.pose + 0.5, f.lighting,
                            f.expression), frames=1) for f in base]
    errs0 = metrics.attribute_errors([(t, 0) for t in targets], targets,
                                     regressor)
    errs = metrics.attribute_errors([(s, 0) for s in shifted], targets,
                                    regressor)
    assert errs["pose"] == pytest.approx(0.5, abs=0.15)
    assert errs0["pose"] <= errs["pose"]


def test_attribute_errors_require_factors(regressor):
    clip = _clip_with_keys([0.0, 0.0])
    with pytest.raises(ValueError):
        metrics.attribute_errors([(clip, 0)], [clip], regressor)


def test_regressor_roundtrip(tmp_path, regressor):
    path = str(tmp_path / "reg.ckpt")
    metrics.save_regressor(regressor, path)
    back = metrics.load_regressor(path)
    x = torch.zeros(1, 3, 64, 64)
    assert torch.equal(regressor(x), back(x))


# --- FVD ---

@pytest.fixture(scope="module")
def extractor():
    return metrics.VideoFeatureExtractor()


def _clips(n, seed, frames=4):
    rng = np.random.default_rng(seed)
    return [vd.random_clip(rng, frames=frames, size=(32, 32)) for _ in range(n)]


def test_fvd_identical_sets_near_zero(extractor):
    clips = _clips(6, 9)
    assert metrics.fvd(clips, clips, extractor) <= 1e-6


def test_fvd_symmetric(extractor):
    a, b = _clips(6, 10), _clips(6, 11)
    assert metrics.fvd(a, b, extractor) == pytest.approx(
        metrics.fvd(b, a, extractor), abs=1e-9)


def test_fvd_monotone_in_corruption(extractor):
    real = _clips(8, 12)
    rng = np.random.default_rng(13)

    def corrupt(mag):
        return [vd.VideoClip(
            frames=np.clip(c.frames + rng.uniform(-mag, mag, c.frames.shape)
                           .astype(np.float32), -1, 1), masks=None)
            for c in real]

    small = metrics.fvd(real, corrupt(0.1), extractor)
    large = metrics.fvd(real, corrupt(0.8), extractor)
    assert 0.0 <= small < large


def test_fvd_split_half_noise_floor(extractor):
    clips = _clips(12, 14)
    floor = metrics.fvd(clips[:6], clips[6:], extractor)
    assert floor >= 0.0
    corrupted = metrics.fvd(clips[:6], [
        vd.VideoClip(frames=np.clip(c.frames + 0.8, -1, 1), masks=None)
        for c in clips[6:]], extractor)
    assert corrupted > floor


def test_fvd_needs_two_clips(extractor):
    clips = _clips(2, 15)
    with pytest.raises(ValueError):
        metrics.fvd(clips[:1], clips, extractor)


def test_extractor_is_pinned(extractor):
    other = metrics.VideoFeatureExtractor()
    clip = _clips(1, 16)[0]
    assert np.array_equal(extractor(clip), other(clip))


def test_frechet_distance_zero_for_equal_gaussians():
    mu = np.array([1.0, -2.0])
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert metrics.frechet_distance(mu, cov, mu, cov) == pytest.approx(0.0, abs=1e-9)


def test_frechet_distance_mean_separation():
    cov = np.eye(2)
    d = metrics.frechet_distance(np.zeros(2), cov, np.array([3.0, 4.0]), cov)
    assert d == pytest.approx(25.0, abs=1e-9)
