"""FMCW ultrasonic ranging: chirp synthesis, dechirping, delay estimation.

The emitter plays a saw-tooth linear chirp continuously. Each microphone
receives it through a path delay t0; multiplying by the reference sweep and
lowpass filtering leaves a beat tone whose frequency is (B/T) * t0, so the
beat spectrum encodes the hand geometry around the device.

The beat signal is periodic with the chirp period, which caps multi-period
spectral resolution at 1/T. estimate_delay therefore folds the beat into a
single averaged period and fits a real cosine by weighted least squares on
a progressively refined frequency grid; that stays accurate even when the
beat sits a fraction of a comb line above DC.
"""
from __future__ import annotations

import numpy as np
from scipy import signal as sps

from .config import ChirpConfig, FmcwConfig
from . import dsp
from .types import AudioSegment, PipelineError

_MIN_DET = 1e-12


def _check_chirp(cfg: ChirpConfig, rate: int) -> None:
    if not 0 < cfg.f0 < cfg.f1:
        raise PipelineError(f"bad-chirp: f0={cfg.f0} f1={cfg.f1}")
    if cfg.period <= 0:
        raise PipelineError(f"bad-chirp: period={cfg.period}")
    if rate < 2 * cfg.f1:
        raise PipelineError(
            f"undersampled-chirp: rate {rate} < 2*f1 ({2 * cfg.f1})"
        )


def chirp_waveform(t: np.ndarray, cfg: ChirpConfig) -> np.ndarray:
    """Evaluate the periodic saw-tooth chirp at arbitrary times (seconds)."""
    tau = np.mod(np.asarray(t, dtype=np.float64), cfg.period)
    phase = 2.0 * np.pi * cfg.f0 * tau + np.pi * cfg.slope * tau ** 2
    return cfg.amplitude * np.cos(phase)


def generate_chirp(cfg: ChirpConfig, duration: float, rate: int,
                   start: float = 0.0) -> AudioSegment:
    """Chirp train of the given duration; `start` offsets into the sweep cycle."""
    _check_chirp(cfg, rate)
    n = int(round(duration * rate))
    if n < 1:
        raise PipelineError(f"segment-too-short: duration {duration} s")
    t = np.arange(n) / rate + start
    return AudioSegment(chirp_waveform(t, cfg), rate)


def dechirp(received: AudioSegment, cfg: ChirpConfig, ref_start: float = 0.0,
            lpf_hz: float = 4000.0, lpf_order: int = 8) -> AudioSegment:
    """Multiply by the reference sweep and lowpass, leaving the beat signal.

    ref_start is when (segment-relative seconds) the reference sweep began a
    period; all channels of one recording must share it, otherwise per-channel
    dechirping would cancel exactly the relative delays of interest.
    """
    _check_chirp(cfg, received.rate)
    t = np.arange(len(received)) / received.rate
    ref = chirp_waveform(t - ref_start, cfg)
    if cfg.amplitude != 0:
        ref = ref / cfg.amplitude
    product = AudioSegment(received.samples * ref, received.rate)
    return dsp.butterworth_lowpass(product, lpf_hz, lpf_order)


def estimate_period_phase(received: AudioSegment, cfg: ChirpConfig) -> float:
    """Locate the sweep-cycle start within the first period of a recording.

    Matched-filters one reference period against the opening of the signal;
    returns the offset in [0, period). Use the emitter-side channel, whose
    direct path dominates any echoes.
    """
    _check_chirp(cfg, received.rate)
    p = int(round(cfg.period * received.rate))
    if len(received) < 2 * p:
        raise PipelineError(
            f"segment-too-short: need two chirp periods ({2 * p} samples)"
        )
    template = chirp_waveform(np.arange(p) / received.rate, cfg)
    span = received.samples[: min(len(received), 4 * p)]
    raw = np.correlate(span, template, mode="valid")
    # the correlation is a bandpass pulse riding a ~20 kHz carrier; peak-pick
    # its envelope, not the raw samples, or the estimate snaps to carrier cycles
    corr = np.abs(sps.hilbert(raw))
    k = int(np.argmax(corr[:p]))
    a, b, c = corr[(k - 1) % p], corr[k], corr[(k + 1) % p]
    denom = a - 2 * b + c
    delta = 0.0 if abs(denom) < _MIN_DET else 0.5 * (a - c) / denom
    delta = float(np.clip(delta, -0.5, 0.5))
    return ((k + delta) % p) / received.rate


def fold_periods(beat: AudioSegment, cfg: ChirpConfig,
                 fold_offset: float = 0.0) -> np.ndarray:
    """Average the beat over whole chirp periods; returns one period.

    fold_offset (seconds) aligns the fold grid with the reference sweep used
    in dechirp (pass ref_start mod period). The beat tone's phase resets at
    sweep boundaries; folding on that grid keeps the reset at the window
    edges instead of mid-period.
    """
    p = int(round(cfg.period * beat.rate))
    skip = int(round((fold_offset % cfg.period) * beat.rate)) % p
    x = beat.samples[skip:]
    n_full = len(x) // p
    if n_full < 1:
        raise PipelineError(
            f"segment-too-short: {len(beat)} samples < one period ({p})"
        )
    return x[: n_full * p].reshape(n_full, p).mean(axis=0)


def _tone_energy(p: np.ndarray, w: np.ndarray, freqs: np.ndarray, rate: int) -> np.ndarray:
    """Explained energy of a weighted LS fit of A*cos + B*sin at each freq."""
    t = np.arange(len(p)) / rate
    wp = w * p
    out = np.empty(len(freqs))
    for i, f in enumerate(freqs):
        ph = 2.0 * np.pi * f * t
        c = np.cos(ph)
        s = np.sin(ph)
        gcc = np.dot(w, c * c)
        gcs = np.dot(w, c * s)
        gss = np.dot(w, s * s)
        bc = np.dot(wp, c)
        bs = np.dot(wp, s)
        det = gcc * gss - gcs * gcs
        if det < _MIN_DET:
            out[i] = bc * bc / max(gcc, _MIN_DET)
        else:
            tc = (gss * bc - gcs * bs) / det
            ts = (gcc * bs - gcs * bc) / det
            out[i] = bc * tc + bs * ts
    return out


def estimate_beat_frequency(beat: AudioSegment, cfg: ChirpConfig,
                            f_min: float = 2.0, f_max: float = 600.0,
                            fold_offset: float = 0.0) -> float:
    """Beat-tone frequency in Hz from a dechirped signal."""
    folded = fold_periods(beat, cfg, fold_offset)
    folded = folded - folded.mean()
    w = dsp.hann_periodic(len(folded))
    freqs = np.arange(f_min, f_max, 2.0)
    best = float(freqs[np.argmax(_tone_energy(folded, w, freqs, beat.rate))])
    for step in (0.1, 0.005):
        grid = best + np.arange(-25, 26) * step
        grid = grid[grid > 0.0]
        best = float(grid[np.argmax(_tone_energy(folded, w, grid, beat.rate))])
    return best


def estimate_delay(beat: AudioSegment, cfg: ChirpConfig,
                   f_min: float = 2.0, f_max: float = 600.0,
                   fold_offset: float = 0.0) -> float:
    """Path delay t0 in seconds: beat frequency divided by the sweep slope."""
    return estimate_beat_frequency(beat, cfg, f_min, f_max, fold_offset) / cfg.slope


# ---------------------------------------------------------------------------
# beat-signal features
# ---------------------------------------------------------------------------

def beat_spectrogram(beat: AudioSegment, cfg: FmcwConfig) -> np.ndarray:
    """Low-frequency log-magnitude beat map, shape (spec_bins, spec_frames)."""
    spec = dsp.stft(beat, cfg.stft_window, cfg.stft_hop)
    mags = np.log10(np.maximum(spec.magnitudes[: cfg.spec_bins], cfg.log_floor))
    return dsp.pad_or_trim(mags, cfg.spec_frames, axis=1)


def beat_peak_series(beat: AudioSegment, cfg: FmcwConfig) -> np.ndarray:
    """Per-frame beat-peak track, shape (2, spec_frames): freq Hz, log magnitude."""
    spec = dsp.stft(beat, cfg.stft_window, cfg.stft_hop)
    mags = spec.magnitudes[: cfg.spec_bins]
    peaks = np.argmax(mags, axis=0)
    n = mags.shape[1]
    cols = np.arange(n)
    k = np.clip(peaks, 1, cfg.spec_bins - 2)
    a = mags[k - 1, cols]
    b = mags[k, cols]
    c = mags[k + 1, cols]
    denom = a - 2 * b + c
    delta = np.where(np.abs(denom) < _MIN_DET, 0.0, 0.5 * (a - c) / denom)
    delta = np.clip(delta, -0.5, 0.5)
    freq = (peaks + np.where(peaks == k, delta, 0.0)) * spec.bin_hz
    level = np.log10(np.maximum(b, cfg.log_floor))
    out = np.stack([freq, level])
    return dsp.pad_or_trim(out, cfg.spec_frames, axis=1)
