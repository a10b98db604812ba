"""Feature contracts: reference channel rule, difference maps, pairwise
DTW similarities, IMU windows, and the per-sample primitive cache."""
from __future__ import annotations

from itertools import combinations

import numpy as np
import pytest

from gestfuse import features, preprocess, simulate
from gestfuse.config import PipelineConfig, SimConfig
from gestfuse.types import AudioSegment, ImuStream, PipelineError

CFG = PipelineConfig()


@pytest.fixture(scope="module")
def sample():
    plan = simulate.SessionPlan(user_id=0, label=3, commands=list(range(10)),
                                posture="sitting", master_seed=55)
    data = simulate.simulate_session(plan, SimConfig())
    samples, _ = preprocess.preprocess_session(data, CFG.dsp)
    return samples[0]


@pytest.fixture(scope="module")
def primitives(sample):
    return features.sample_primitives(sample, CFG)


# -- reference channel --------------------------------------------------------

def test_reference_channel_rule():
    assert features.reference_channel(["re_inner", "re_outer", "watch"]) == "re_inner"
    assert features.reference_channel(["le_outer", "re_outer", "watch", "ring"]) == "re_outer"
    with pytest.raises(PipelineError, match="missing-channel"):
        features.reference_channel(["le_outer", "watch"])


# -- difference maps ----------------------------------------------------------

def test_difference_frame_identical_maps():
    m = np.random.default_rng(0).normal(size=(128, 250))
    maps = {"le_outer": m.copy(), "re_outer": m.copy(), "re_inner": m.copy()}
    out = features.vocal_difference_frame(maps, "re_inner")
    assert out.shape == (3 * 128, 250)
    assert np.allclose(out[:256], 0.0)
    assert np.array_equal(out[256:], m)


def test_difference_frame_four_channels_shape():
    rng = np.random.default_rng(1)
    maps = {c: rng.normal(size=(128, 250))
            for c in ("le_outer", "le_inner", "re_outer", "re_inner")}
    out = features.vocal_difference_frame(maps, "re_inner")
    assert out.shape == (512, 250)  # (n+1)*128 with n=3 monitored


def test_difference_frame_attenuated_channel_negative():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(128, 250))
    maps = {"re_inner": base, "re_outer": base - 1.5}
    out = features.vocal_difference_frame(maps, "re_inner")
    assert out[:128].mean() < 0.0


def test_difference_frame_errors():
    maps = {"re_inner": np.zeros((128, 250)), "re_outer": np.zeros((128, 249))}
    with pytest.raises(PipelineError, match="shape-mismatch"):
        features.vocal_difference_frame(maps, "re_inner")
    with pytest.raises(PipelineError, match="missing-channel"):
        features.vocal_difference_frame({"re_outer": np.zeros((2, 2))}, "re_inner")


# -- pairwise similarities ----------------------------------------------------

def _segs(series, n_seg=3):
    return np.stack([series for _ in range(n_seg)])


def test_pair_count_formula():
    rng = np.random.default_rng(3)
    all_names = ["le_outer", "le_inner", "re_outer", "re_inner", "watch", "ring"]
    for n_ch, expected in ((2, 1), (3, 3), (4, 6), (6, 15)):
        segments = {c: _segs(rng.normal(size=(13, 20))) for c in all_names[:n_ch]}
        dists, pairs = features.pairwise_mfcc_distances(segments)
        # spec counts pairs over n monitored + 1 reference channels
        n_monitored = n_ch - 1
        assert len(dists) == n_monitored * (n_monitored + 1) // 2 == expected
        assert len(pairs) == len(set(pairs))


def test_identical_channels_similarity_one():
    seg = _segs(np.random.default_rng(4).normal(size=(13, 20)))
    segments = {"re_inner": seg.copy(), "re_outer": seg.copy()}
    sims = features.pairwise_mfcc_similarity(segments, tau=1.0)
    assert np.allclose(sims, 1.0)
    dists, _ = features.pairwise_mfcc_distances(segments)
    assert dists[0] == 0.0


def test_shifted_channel_less_similar():
    rng = np.random.default_rng(5)
    base = rng.normal(size=(13, 40))
    shifted = np.roll(base, 5, axis=1)
    segments = {
        "le_outer": _segs(base[:, :20]),
        "re_outer": _segs(base[:, :20]),
        "re_inner": _segs(shifted[:, :20]),
    }
    sims = features.pairwise_mfcc_similarity(segments, tau=1.0)
    _, pairs = features.pairwise_mfcc_distances(segments)
    by_name = dict(zip(pairs, sims))
    assert by_name["le_outer|re_outer"] == pytest.approx(1.0)
    assert by_name["le_outer|re_inner"] < 1.0
    assert by_name["re_outer|re_inner"] < 1.0


def test_pairwise_requires_two_channels():
    with pytest.raises(PipelineError, match="missing-channel"):
        features.pairwise_mfcc_distances({"re_inner": np.zeros((1, 13, 20))})


# -- IMU window ---------------------------------------------------------------

def _imu_n(n, seed=0):
    rng = np.random.default_rng(seed)
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return ImuStream(np.arange(n) / 200.0, rng.normal(size=(n, 3)),
                     rng.normal(size=(n, 3)), quat)


def test_imu_window_exact_length():
    imu = _imu_n(400)
    flat = features.imu_window(imu)
    assert flat.shape == (4000,)
    expected = np.hstack([imu.accel, imu.gyro, imu.quat]).reshape(-1)
    assert np.array_equal(flat, expected)


def test_imu_window_center_crop():
    imu = _imu_n(600)
    flat = features.imu_window(imu)
    rows = flat.reshape(400, 10)
    assert np.array_equal(rows[:, :3], imu.accel[100:500])


def test_imu_window_symmetric_pad():
    imu = _imu_n(100)
    rows = features.imu_window(imu).reshape(400, 10)
    assert np.allclose(rows[:150], 0.0)
    assert np.allclose(rows[250:], 0.0)
    assert np.array_equal(rows[150:250, 3:6], imu.gyro)


def test_imu_window_value_order():
    imu = _imu_n(1)
    rows = features.imu_window(imu).reshape(400, 10)
    mid = rows[(400 - 1) // 2]
    assert np.array_equal(mid, np.concatenate([imu.accel[0], imu.gyro[0], imu.quat[0]]))


def test_imu_window_empty_stream():
    with pytest.raises(PipelineError, match="empty-stream"):
        features.imu_window(ImuStream(np.zeros(0), np.zeros((0, 3)),
                                      np.zeros((0, 3)), np.zeros((0, 4))))


# -- primitives cache ---------------------------------------------------------

def test_primitives_shapes(primitives):
    for ch in ("le_outer", "le_inner", "re_outer", "re_inner", "watch", "ring"):
        assert primitives[f"mel__{ch}"].shape == (128, 250)
        assert primitives[f"mel__{ch}"].dtype == np.float16
        assert primitives[f"amp__{ch}"].shape == (250,)
        assert primitives[f"beat_spec__{ch}"].shape == (128, 250)
        assert primitives[f"beat_stats__{ch}"].shape == (2, 250)
    assert primitives["dists"].shape == (15,)
    assert len(primitives["dist_pairs"]) == 15
    assert primitives["imu"].shape == (4000,)
    assert np.all(np.isfinite(primitives["dists"]))


def test_cache_selectors_subset(primitives):
    channels = ["re_outer", "re_inner"]
    vmap = features.vocal_map_from_cache(primitives, channels)
    assert vmap.shape == (256, 250)
    umap = features.ultra_map_from_cache(primitives, channels)
    assert umap.shape == (256, 250)
    amp = features.amp_vector_from_cache(primitives, channels)
    assert amp.shape == (500,)
    dists, pairs = features.dist_vector_from_cache(primitives, channels)
    assert pairs == ["re_outer|re_inner"]
    full_pairs = [str(p) for p in primitives["dist_pairs"]]
    assert dists[0] == primitives["dists"][full_pairs.index("re_outer|re_inner")]
    stats = features.stats_vector_from_cache(primitives, channels)
    assert stats.shape == (1000,)


def test_cache_selector_all_channels(primitives):
    channels = ["le_outer", "le_inner", "re_outer", "re_inner", "watch", "ring"]
    assert features.vocal_map_from_cache(primitives, channels).shape == (768, 250)
    dists, pairs = features.dist_vector_from_cache(primitives, channels)
    assert len(dists) == 15
    assert pairs == [f"{a}|{b}" for a, b in combinations(channels, 2)]


def test_difference_plane_sign_on_real_sample(primitives):
    # gesture 3 occludes everything; the watch channel is closer to the mouth
    # than the attenuated inner reference, so no contract on sign there, but
    # the map must be finite and non-degenerate
    vmap = features.vocal_map_from_cache(
        primitives, ["le_outer", "re_outer", "re_inner"])
    assert np.all(np.isfinite(vmap))
    assert vmap.std() > 0.01
