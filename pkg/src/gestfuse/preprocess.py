"""Turn raw sessions into aligned, segmented, trimmed, band-split samples.

Order of operations: clap-based IMU alignment, tick segmentation, band
separation at 17.5 kHz (ultra stays at 48 kHz, vocal resampled to 16 kHz),
then energy VAD trimming driven by the vocal reference channel and applied
to every modality.
"""
from __future__ import annotations

import numpy as np

from . import dsp
from .config import DspConfig
from .simulate import SessionData
from .types import (AudioSegment, GestureSample, ImuStream,
                    MultiChannelRecording, PipelineError, sort_channels)

SYNC_WINDOW_S = 0.010
SYNC_MAD_K = 8.0
VAD_WINDOW_S = 0.020
VAD_HOP_S = 0.010
VAD_NOISE_EDGE_S = 0.100
VAD_MARGIN_DB = 6.0
_ALIGN_PREFERENCE = ("re_inner", "le_inner", "re_outer", "le_outer", "watch", "ring")


def _window_rms(values: np.ndarray, win: int) -> np.ndarray:
    n = len(values) // win
    if n == 0:
        raise PipelineError("segment-too-short: sync envelope needs one window")
    return np.sqrt(np.mean(values[: n * win].reshape(n, win) ** 2, axis=1))


def detect_sync_peak(obj: AudioSegment | ImuStream) -> float:
    """Time of the clap event: first local envelope maximum above an
    adaptive threshold (median + 8 * MAD), refined to the loudest raw sample
    near that window."""
    if isinstance(obj, AudioSegment):
        values = np.abs(obj.samples)
        win = max(1, int(round(SYNC_WINDOW_S * obj.rate)))
        times = None
    else:
        values = np.linalg.norm(obj.accel, axis=1)
        step = float(np.median(np.diff(obj.t))) if len(obj.t) > 1 else SYNC_WINDOW_S
        win = max(1, int(round(SYNC_WINDOW_S / step)))
        times = obj.t
    env = _window_rms(values, win)
    med = float(np.median(env))
    mad = float(np.median(np.abs(env - med)))
    thr = med + SYNC_MAD_K * max(mad, 1e-12)
    peak = None
    for i in range(len(env)):
        if env[i] <= thr:
            continue
        left_ok = i == 0 or env[i] >= env[i - 1]
        right_ok = i == len(env) - 1 or env[i] >= env[i + 1]
        if left_ok and right_ok:
            peak = i
            break
    if peak is None:
        raise PipelineError("no-sync-event: envelope never exceeds threshold")
    lo = max(0, (peak - 1) * win)
    hi = min(len(values), (peak + 2) * win)
    j = lo + int(np.argmax(values[lo:hi]))
    if times is None:
        return j / obj.rate
    return float(times[j])


def audio_sync_time(rec: MultiChannelRecording) -> float:
    """Clap time from the first preferred channel where detection succeeds."""
    err: PipelineError | None = None
    for name in _ALIGN_PREFERENCE:
        if name not in rec.channels:
            continue
        try:
            return detect_sync_peak(rec.channels[name])
        except PipelineError as e:
            err = e
    raise err or PipelineError("missing-channel: no audio channel to align against")


def align_channels(rec: MultiChannelRecording) -> MultiChannelRecording:
    """Shift IMU timestamps so its clap spike coincides with the audio clap."""
    t_audio = audio_sync_time(rec)
    t_imu = detect_sync_peak(rec.imu)
    return MultiChannelRecording(rec.channels, rec.imu.shift_time(t_audio - t_imu),
                                 rec.ticks)


def segment_by_ticks(rec: MultiChannelRecording) -> list[dict]:
    """Raw samples spanning [tick_i, tick_{i+1}), the last one to the end.
    IMU times are rebased so each sample starts at t=0."""
    if not rec.ticks:
        raise PipelineError("tick-out-of-range: no ticks")
    duration = rec.duration
    for tick in rec.ticks:
        if not 0.0 <= tick < duration:
            raise PipelineError(f"tick-out-of-range: {tick} s in {duration:.2f} s recording")
    bounds = list(rec.ticks) + [duration]
    out = []
    for k in range(len(rec.ticks)):
        t0, t1 = bounds[k], bounds[k + 1]
        channels = {c: seg.slice_time(t0, t1) for c, seg in rec.channels.items()}
        imu = rec.imu.slice_time(t0, t1)
        out.append({"channels": channels, "imu": ImuStream(imu.t - t0, imu.accel,
                                                           imu.gyro, imu.quat),
                    "index": k, "start": t0, "end": t1})
    return out


def band_pair(seg: AudioSegment, cutoff_hz: float, order: int) -> tuple[AudioSegment, AudioSegment]:
    """Complementary (lowpass, highpass) pair at the band-split cutoff."""
    low = dsp.butterworth_lowpass(seg, cutoff_hz, order)
    high = dsp.butterworth_highpass(seg, cutoff_hz, order)
    return low, high


def split_bands(channels: dict[str, AudioSegment], cfg: DspConfig) -> tuple[dict, dict]:
    """Vocal band (lowpassed then resampled to the vocal rate) and ultra band
    (highpassed, original rate) per channel."""
    vocal = {}
    ultra = {}
    for name in sort_channels(channels.keys()):
        low, high = band_pair(channels[name], cfg.band_split_hz, cfg.band_order)
        vocal[name] = dsp.resample(low, cfg.vocal_rate)
        ultra[name] = high
    return vocal, ultra


def vad_reference(names) -> str:
    if "re_inner" in names:
        return "re_inner"
    if "re_outer" in names:
        return "re_outer"
    raise PipelineError("missing-channel: need re_inner or re_outer for VAD")


def vad_bounds(seg: AudioSegment) -> tuple[float, float]:
    """Active-speech interval from short-time log energy: noise floor taken
    from the first/last 100 ms, threshold floor + 6 dB."""
    win = max(1, int(round(VAD_WINDOW_S * seg.rate)))
    hop = max(1, int(round(VAD_HOP_S * seg.rate)))
    n_frames = (len(seg) - win) // hop + 1
    if n_frames < 1:
        raise PipelineError("segment-too-short: VAD needs one frame")
    starts = np.arange(n_frames) * hop
    frames = seg.samples[starts[:, None] + np.arange(win)[None, :]]
    energy_db = 10.0 * np.log10(np.mean(frames ** 2, axis=1) + 1e-12)
    edge = []
    for i in range(n_frames):
        if starts[i] + win <= VAD_NOISE_EDGE_S * seg.rate:
            edge.append(energy_db[i])
        if starts[i] >= len(seg) - VAD_NOISE_EDGE_S * seg.rate:
            edge.append(energy_db[i])
    floor = float(np.median(edge)) if edge else float(np.min(energy_db))
    thr = floor + VAD_MARGIN_DB
    active = np.flatnonzero(energy_db > thr)
    if len(active) == 0:
        raise PipelineError("no-voice-activity")
    t0 = float(starts[active[0]]) / seg.rate
    t1 = float(starts[active[-1]] + win) / seg.rate
    return t0, min(t1, seg.duration)


def vad_trim(vocal: dict[str, AudioSegment], ultra: dict[str, AudioSegment],
             imu: ImuStream) -> tuple[dict, dict, ImuStream, tuple[float, float]]:
    """Trim leading/trailing silence from every modality using the vocal
    reference channel's bounds. Never lengthens; interior left untouched."""
    ref = vad_reference(vocal.keys())
    t0, t1 = vad_bounds(vocal[ref])
    vocal_out = {c: seg.slice_time(t0, t1) for c, seg in vocal.items()}
    ultra_out = {c: seg.slice_time(t0, t1) for c, seg in ultra.items()}
    imu_out = imu.slice_time(t0, t1)
    imu_out = ImuStream(imu_out.t - t0, imu_out.accel, imu_out.gyro, imu_out.quat)
    return vocal_out, ultra_out, imu_out, (t0, t1)


def preprocess_session(data: SessionData, cfg: DspConfig | None = None) -> tuple[list[GestureSample], dict]:
    """Full pipeline for one session; returns samples plus a small report of
    what alignment and trimming did (for auditing against ground truth)."""
    cfg = cfg or DspConfig()
    rec = MultiChannelRecording(channels=data.channels, imu=data.imu,
                                ticks=list(data.ticks))
    t_audio = audio_sync_time(rec)
    aligned = align_channels(rec)
    shift = float(aligned.imu.t[0] - rec.imu.t[0])
    meta = data.meta
    commands = meta.get("commands", [])
    samples = []
    trims = []
    for raw in segment_by_ticks(aligned):
        vocal, ultra = split_bands(raw["channels"], cfg)
        vocal, ultra, imu, (t0, t1) = vad_trim(vocal, ultra, raw["imu"])
        k = raw["index"]
        samples.append(GestureSample(
            vocal=vocal, ultra=ultra, imu=imu,
            label=int(meta["label"]), user_id=int(meta["user_id"]),
            session=int(meta["label"]), index=k,
            command_id=int(commands[k]) if k < len(commands) else -1,
        ))
        trims.append({"index": k, "start": raw["start"], "end": raw["end"],
                      "vad": (raw["start"] + t0, raw["start"] + t1)})
    report = {"imu_shift": shift, "audio_clap": float(t_audio), "trims": trims}
    return samples, report
