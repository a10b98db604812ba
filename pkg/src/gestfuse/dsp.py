"""Signal-processing primitives shared by the vocal and ultrasonic pipelines.

Module-level functions over AudioSegment / plain arrays. Filter design and
resampling lean on scipy; framing, mel analysis and DTW are implemented here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal as sps
from scipy.fft import dct

from . import _kernels
from .types import AudioSegment, PipelineError

EPS = 1e-12


# ---------------------------------------------------------------------------
# framing / STFT
# ---------------------------------------------------------------------------

def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    """Slice x into overlapping frames, shape (n_frames, window_len).

    Frame count is floor((len(x) - window_len) / hop) + 1; the tail that
    does not fill a frame is dropped.
    """
    x = np.asarray(x)
    if window_len < 1 or hop < 1:
        raise PipelineError(f"bad-framing: window={window_len} hop={hop}")
    if len(x) < window_len:
        raise PipelineError(
            f"segment-too-short: {len(x)} samples < window {window_len}"
        )
    n_frames = (len(x) - window_len) // hop + 1
    idx = np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


@dataclass
class Spectrogram:
    """Magnitude STFT plus the axis scales needed to interpret it."""

    magnitudes: np.ndarray  # (n_bins, n_frames)
    bin_hz: float
    hop_s: float
    rate: int

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


def stft(segment: AudioSegment, window_len: int, hop: int) -> Spectrogram:
    """Short-time Fourier magnitude with a periodic Hann window."""
    frames = frame_signal(segment.samples, window_len, hop)
    win = hann_periodic(window_len)
    mags = np.abs(np.fft.rfft(frames * win, axis=1)).T
    return Spectrogram(
        magnitudes=mags,
        bin_hz=segment.rate / window_len,
        hop_s=hop / segment.rate,
        rate=segment.rate,
    )


def pad_or_trim(arr: np.ndarray, length: int, axis: int = -1) -> np.ndarray:
    """Zero-pad or truncate arr along axis to exactly `length`."""
    cur = arr.shape[axis]
    if cur == length:
        return arr
    if cur > length:
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(0, length)
        return arr[tuple(sl)]
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (0, length - cur)
    return np.pad(arr, pad)


# ---------------------------------------------------------------------------
# mel / MFCC
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank_cached(n_mels, n_fft, rate, fmin, fmax):
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * (rate / n_fft)
    fb = np.zeros((n_mels, len(bins)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bins - lo) / max(mid - lo, EPS)
        falling = (hi - bins) / max(hi - mid, EPS)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_filterbank(n_mels: int, n_fft: int, rate: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular mel filterbank (HTK mel scale), shape (n_mels, n_fft//2 + 1)."""
    if fmax is None:
        fmax = rate / 2.0
    if not 0 <= fmin < fmax <= rate / 2.0:
        raise PipelineError(f"bad-mel-range: [{fmin}, {fmax}] at rate {rate}")
    return _mel_filterbank_cached(n_mels, n_fft, rate, float(fmin), float(fmax)).copy()


def log_mel_energies(segment: AudioSegment, window_len: int = 512, hop: int = 192,
                     n_mels: int = 128, fmin: float = 0.0, fmax: float | None = None,
                     log_floor: float = 1e-10) -> np.ndarray:
    """Log10 mel-band energies at the natural frame count, shape (n_mels, T)."""
    spec = stft(segment, window_len, hop)
    power = spec.magnitudes ** 2
    fb = mel_filterbank(n_mels, window_len, segment.rate, fmin, fmax)
    return np.log10(np.maximum(fb @ power, log_floor))


def mel_spectrogram(segment: AudioSegment, window_len: int = 512, hop: int = 192,
                    n_mels: int = 128, n_frames: int = 250, fmin: float = 0.0,
                    fmax: float | None = None, log_floor: float = 1e-10) -> np.ndarray:
    """Fixed-size log-mel map (n_mels, n_frames), zero-padded or truncated in time."""
    logmel = log_mel_energies(segment, window_len, hop, n_mels, fmin, fmax, log_floor)
    return pad_or_trim(logmel, n_frames, axis=1)


def mfcc(segment: AudioSegment, n_coeffs: int = 13, window_len: int = 512,
         hop: int = 192, n_mels: int = 128, fmin: float = 0.0,
         fmax: float | None = None, log_floor: float = 1e-10) -> np.ndarray:
    """MFCC series at the natural frame count, shape (n_coeffs, T).

    DCT-II (orthonormal) over the mel axis of the log-mel energies.
    """
    if n_coeffs < 1 or n_coeffs > n_mels:
        raise PipelineError(
            f"too-many-coefficients: {n_coeffs} requested, {n_mels} mel bands"
        )
    logmel = log_mel_energies(segment, window_len, hop, n_mels, fmin, fmax, log_floor)
    return dct(logmel, type=2, axis=0, norm="ortho")[:n_coeffs]


def resample_mfcc(series: np.ndarray, window: int = 20, stride: int = 10) -> np.ndarray:
    """Split an MFCC series into fixed-length windows for segment-wise DTW.

    Returns (n_segments, n_coeffs, window). The tail that does not fill a
    window is dropped; a series shorter than one window yields a single
    zero-padded segment.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise PipelineError("bad-sequence: MFCC series must be 2-d")
    n_coeffs, t = series.shape
    if t < window:
        return pad_or_trim(series, window, axis=1)[None, :, :]
    n_seg = (t - window) // stride + 1
    out = np.empty((n_seg, n_coeffs, window))
    for k in range(n_seg):
        out[k] = series[:, k * stride: k * stride + window]
    return out


# ---------------------------------------------------------------------------
# DTW
# ---------------------------------------------------------------------------

def dtw_distance(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> float:
    """Dynamic time warping distance with steps (1,0), (0,1), (1,1).

    Inputs are frame sequences, shape (T,) or (T, D); both endpoints are
    matched and no warping-window constraint is applied.
    """
    cost = _kernels.dtw_cost_matrix(a, b, metric)
    return _kernels.dtw_from_cost(cost)


# ---------------------------------------------------------------------------
# filters / resampling
# ---------------------------------------------------------------------------

def _butter_sos(cutoff_hz: float, order: int, rate: int, btype: str) -> np.ndarray:
    if order < 1:
        raise PipelineError(f"bad-order: {order}")
    if not 0.0 < cutoff_hz < rate / 2.0:
        raise PipelineError(
            f"bad-cutoff: {cutoff_hz} Hz outside (0, {rate / 2.0}) at rate {rate}"
        )
    return sps.butter(order, cutoff_hz, btype=btype, fs=rate, output="sos")


def butterworth_lowpass(segment: AudioSegment, cutoff_hz: float, order: int = 8) -> AudioSegment:
    sos = _butter_sos(cutoff_hz, order, segment.rate, "lowpass")
    return AudioSegment(sps.sosfilt(sos, segment.samples), segment.rate)


def butterworth_highpass(segment: AudioSegment, cutoff_hz: float, order: int = 8) -> AudioSegment:
    sos = _butter_sos(cutoff_hz, order, segment.rate, "highpass")
    return AudioSegment(sps.sosfilt(sos, segment.samples), segment.rate)


def butterworth_response_db(cutoff_hz: float, order: int, rate: int, btype: str,
                            freqs_hz: np.ndarray) -> np.ndarray:
    """Designed-filter magnitude response in dB at the given frequencies."""
    sos = _butter_sos(cutoff_hz, order, rate, btype)
    _, h = sps.sosfreqz(sos, worN=np.asarray(freqs_hz, dtype=np.float64), fs=rate)
    return 20.0 * np.log10(np.maximum(np.abs(h), EPS))


def resample(segment: AudioSegment, target_rate: int) -> AudioSegment:
    """Polyphase resampling to target_rate."""
    if target_rate <= 0:
        raise PipelineError(f"bad-sample-rate: {target_rate}")
    if target_rate == segment.rate:
        return AudioSegment(segment.samples.copy(), segment.rate)
    g = math.gcd(segment.rate, target_rate)
    out = sps.resample_poly(segment.samples, target_rate // g, segment.rate // g)
    return AudioSegment(out, target_rate)


# ---------------------------------------------------------------------------
# amplitude
# ---------------------------------------------------------------------------

def amplitude_series(segment: AudioSegment, window: int = 200, stride: int = 200,
                     out_len: int = 250) -> np.ndarray:
    """Windowed RMS amplitude, zero-padded or truncated to out_len values."""
    frames = frame_signal(segment.samples, window, stride)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    return pad_or_trim(rms, out_len)


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(x ** 2)))
