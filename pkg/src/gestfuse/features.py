"""Per-sample features: vocal difference maps, amplitude series, pairwise
MFCC-DTW distances, beat spectrograms and peak statistics, IMU windows.

The expensive primitives (log-mel maps, beat maps, all 15 channel-pair DTW
distances) are computed once per sample and cached; every sensor combination
then assembles its bundles by selecting channel subsets from the cache.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np

from . import dsp, fmcw
from .config import PipelineConfig
from .types import (AudioSegment, GestureSample, ImuStream, PipelineError,
                    sort_channels)

IMU_FRAMES = 400
IMU_VALUES_PER_FRAME = 10


def reference_channel(names) -> str:
    """Right-ear inner mic when inner channels exist, else right-ear outer."""
    names = set(names)
    if "re_inner" in names:
        return "re_inner"
    if "re_outer" in names:
        return "re_outer"
    raise PipelineError("missing-channel: need re_inner or re_outer as reference")


def vocal_difference_frame(mel_maps: dict[str, np.ndarray], ref: str) -> np.ndarray:
    """Stack [m_i - m_ref ... , m_ref] along the band axis: ((n+1)*bands, frames)."""
    if ref not in mel_maps:
        raise PipelineError(f"missing-channel: reference {ref!r}")
    shapes = {m.shape for m in mel_maps.values()}
    if len(shapes) != 1:
        raise PipelineError(f"shape-mismatch: mel maps {sorted(shapes)}")
    ref_map = mel_maps[ref]
    planes = [mel_maps[c] - ref_map for c in sort_channels(mel_maps.keys()) if c != ref]
    planes.append(ref_map)
    return np.concatenate(planes, axis=0)


def pairwise_mfcc_distances(segments: dict[str, np.ndarray]) -> tuple[np.ndarray, list[str]]:
    """Mean DTW distance over aligned 20-frame MFCC segments for every
    unordered channel pair (canonical order), keyed "a|b"."""
    names = sort_channels(segments.keys())
    if len(names) < 2:
        raise PipelineError("missing-channel: need at least two channels for pairs")
    dists = []
    pairs = []
    for a, b in combinations(names, 2):
        sa, sb = segments[a], segments[b]
        m = min(len(sa), len(sb))
        d = np.mean([dsp.dtw_distance(sa[k].T, sb[k].T) for k in range(m)])
        dists.append(float(d))
        pairs.append(f"{a}|{b}")
    return np.array(dists), pairs


def pairwise_mfcc_similarity(segments: dict[str, np.ndarray], tau: float) -> np.ndarray:
    dists, _ = pairwise_mfcc_distances(segments)
    return np.exp(-dists / max(tau, 1e-12))


def imu_window(stream: ImuStream, n_frames: int = IMU_FRAMES) -> np.ndarray:
    """Center-crop or symmetrically zero-pad to n_frames, then flatten
    frame-major as (ax,ay,az,gx,gy,gz,qw,qx,qy,qz) per frame."""
    n = len(stream)
    if n == 0:
        raise PipelineError("empty-stream")
    rows = np.hstack([stream.accel, stream.gyro, stream.quat])
    if n >= n_frames:
        start = (n - n_frames) // 2
        rows = rows[start: start + n_frames]
    else:
        lo = (n_frames - n) // 2
        hi = n_frames - n - lo
        rows = np.vstack([np.zeros((lo, IMU_VALUES_PER_FRAME)), rows,
                          np.zeros((hi, IMU_VALUES_PER_FRAME))])
    return rows.reshape(-1)


def mfcc_segments(seg: AudioSegment, cfg: PipelineConfig) -> np.ndarray:
    d = cfg.dsp
    series = dsp.mfcc(seg, d.n_mfcc, d.stft_window, d.stft_hop, d.n_mels,
                      log_floor=d.log_floor)
    return dsp.resample_mfcc(series, d.mfcc_window, d.mfcc_stride)


def sample_primitives(sample: GestureSample, cfg: PipelineConfig) -> dict[str, np.ndarray]:
    """Everything any sensor combination will need from one sample, as flat
    arrays suitable for an npz cache."""
    d = cfg.dsp
    out: dict[str, np.ndarray] = {}
    segments = {}
    for ch in sample.channels:
        seg = sample.vocal[ch]
        mel = dsp.mel_spectrogram(seg, d.stft_window, d.stft_hop, d.n_mels,
                                  d.mel_frames, log_floor=d.log_floor)
        out[f"mel__{ch}"] = mel.astype(np.float16)
        out[f"amp__{ch}"] = dsp.amplitude_series(
            seg, d.amp_window, d.amp_stride, d.amp_frames).astype(np.float32)
        segments[ch] = mfcc_segments(seg, cfg)
    if len(segments) >= 2:
        dists, pairs = pairwise_mfcc_distances(segments)
        out["dists"] = dists
        out["dist_pairs"] = np.array(pairs)

    if sample.ultra:
        ref_start = 0.0
        if "watch" in sample.ultra:
            ref_start = fmcw.estimate_period_phase(sample.ultra["watch"],
                                                   cfg.fmcw.chirp)
        out["ref_start"] = np.array(ref_start)
        for ch, seg in sample.ultra.items():
            beat = fmcw.dechirp(seg, cfg.fmcw.chirp, ref_start,
                                cfg.fmcw.lpf_hz, cfg.fmcw.lpf_order)
            out[f"beat_spec__{ch}"] = fmcw.beat_spectrogram(beat, cfg.fmcw).astype(np.float16)
            out[f"beat_stats__{ch}"] = fmcw.beat_peak_series(beat, cfg.fmcw).astype(np.float32)

    out["imu"] = imu_window(sample.imu).astype(np.float32)
    return out


def vocal_map_from_cache(cache: dict[str, np.ndarray], channels) -> np.ndarray:
    """Stacked difference mel map for a channel subset, from cached maps."""
    names = sort_channels(channels)
    mel = {c: cache[f"mel__{c}"].astype(np.float32) for c in names}
    return vocal_difference_frame(mel, reference_channel(names))


def ultra_map_from_cache(cache: dict[str, np.ndarray], channels) -> np.ndarray:
    """Stacked beat spectrograms for a channel subset, from cached maps."""
    names = sort_channels(channels)
    maps = [cache[f"beat_spec__{c}"].astype(np.float32) for c in names]
    return np.concatenate(maps, axis=0)


def amp_vector_from_cache(cache: dict[str, np.ndarray], channels) -> np.ndarray:
    names = sort_channels(channels)
    return np.concatenate([cache[f"amp__{c}"] for c in names]).astype(np.float64)


def dist_vector_from_cache(cache: dict[str, np.ndarray], channels) -> tuple[np.ndarray, list[str]]:
    names = sort_channels(channels)
    all_pairs = [str(p) for p in cache["dist_pairs"]]
    index = {p: i for i, p in enumerate(all_pairs)}
    picked = []
    pairs = []
    for a, b in combinations(names, 2):
        key = f"{a}|{b}"
        if key not in index:
            raise PipelineError(f"missing-channel: cached pair {key}")
        picked.append(float(cache["dists"][index[key]]))
        pairs.append(key)
    return np.array(picked), pairs


def stats_vector_from_cache(cache: dict[str, np.ndarray], channels) -> np.ndarray:
    names = sort_channels(channels)
    return np.concatenate([cache[f"beat_stats__{c}"].reshape(-1) for c in names]).astype(np.float64)
