"""Shared data containers for the sensing pipeline.

Everything downstream (preprocessing, features, models) passes these around
instead of bare arrays, so sample rates and channel naming stay attached to
the data they describe.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Canonical channel ordering used everywhere a fixed order matters
# (feature concatenation, pair enumeration, reports).
CHANNEL_ORDER = ("le_outer", "le_inner", "re_outer", "re_inner", "watch", "ring")

AUDIO_RATE = 48_000
VOCAL_RATE = 16_000
IMU_RATE = 200

N_GESTURES = 9
GESTURE_NAMES = (
    "pinch ear rim",
    "calling gesture",
    "support cheek with palm",
    "cover mouth with palm",
    "cover ear with arched palm",
    "thinking face",
    "hold up palm beside nose and mouth",
    "cover mouth with fist",
    "empty hand",
)


class PipelineError(ValueError):
    """Raised when an operation's input contract is violated."""


def sort_channels(names) -> list[str]:
    """Return channel names in canonical order; unknown names rejected."""
    names = list(names)
    for n in names:
        if n not in CHANNEL_ORDER:
            raise PipelineError(f"unknown-channel: {n!r}")
    return [c for c in CHANNEL_ORDER if c in names]


@dataclass
class AudioSegment:
    """Mono audio samples with their sample rate."""

    samples: np.ndarray
    rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise PipelineError("audio-not-mono: expected 1-d sample array")
        if self.rate <= 0:
            raise PipelineError(f"bad-sample-rate: {self.rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate

    def slice_time(self, t0: float, t1: float) -> "AudioSegment":
        i0 = max(0, int(round(t0 * self.rate)))
        i1 = min(len(self.samples), int(round(t1 * self.rate)))
        if i1 <= i0:
            raise PipelineError(f"empty-slice: [{t0}, {t1}] s")
        return AudioSegment(self.samples[i0:i1].copy(), self.rate)


@dataclass
class ImuStream:
    """Timestamped 200 Hz inertial data from the ring-finger device.

    quat rows are (w, x, y, z) unit quaternions.
    """

    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    quat: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.accel = np.asarray(self.accel, dtype=np.float64)
        self.gyro = np.asarray(self.gyro, dtype=np.float64)
        self.quat = np.asarray(self.quat, dtype=np.float64)
        n = len(self.t)
        if self.accel.shape != (n, 3) or self.gyro.shape != (n, 3):
            raise PipelineError("imu-shape-mismatch: accel/gyro must be (n, 3)")
        if self.quat.shape != (n, 4):
            raise PipelineError("imu-shape-mismatch: quat must be (n, 4)")

    def __len__(self) -> int:
        return len(self.t)

    def shift_time(self, dt: float) -> "ImuStream":
        return ImuStream(self.t + dt, self.accel, self.gyro, self.quat)

    def slice_time(self, t0: float, t1: float) -> "ImuStream":
        keep = (self.t >= t0) & (self.t < t1)
        if not keep.any():
            raise PipelineError(f"empty-slice: imu [{t0}, {t1}] s")
        return ImuStream(self.t[keep], self.accel[keep], self.gyro[keep], self.quat[keep])


@dataclass
class MultiChannelRecording:
    """One recording session: synchronized mics plus the IMU and tick marks."""

    channels: dict[str, AudioSegment]
    imu: ImuStream
    ticks: list[float]

    def __post_init__(self):
        if not self.channels:
            raise PipelineError("no-channels")
        rates = {seg.rate for seg in self.channels.values()}
        if len(rates) != 1:
            raise PipelineError(f"mixed-sample-rates: {sorted(rates)}")
        lengths = {len(seg) for seg in self.channels.values()}
        if len(lengths) != 1:
            raise PipelineError("channel-length-mismatch")
        if any(b <= a for a, b in zip(self.ticks, self.ticks[1:])):
            raise PipelineError("ticks-not-increasing")

    @property
    def rate(self) -> int:
        return next(iter(self.channels.values())).rate

    @property
    def duration(self) -> float:
        return next(iter(self.channels.values())).duration


@dataclass
class GestureSample:
    """One segmented command utterance, split into the three sensing bands."""

    vocal: dict[str, AudioSegment]
    ultra: dict[str, AudioSegment]
    imu: ImuStream
    label: int
    user_id: int
    session: int
    index: int
    command_id: int = -1

    @property
    def channels(self) -> list[str]:
        return sort_channels(self.vocal.keys())


@dataclass
class FeatureBundle:
    """Per-sample feature set consumed by the fusion model.

    f_mfcc_dist holds raw pairwise DTW distances; the train-fold temperature
    turns them into similarities at model time. Embeddings (f_spec, f_ultra_spec)
    are filled in by the extractor stage and may be absent for modalities the
    sensor combo does not provide.
    """

    label: int
    user_id: int
    session: int
    index: int
    f_spec: np.ndarray | None = None
    f_amp: np.ndarray | None = None
    f_mfcc_dist: np.ndarray | None = None
    f_ultra_spec: np.ndarray | None = None
    f_ultra_stats: np.ndarray | None = None
    f_imu: np.ndarray | None = None
    pair_names: list[str] = field(default_factory=list)

    def vocal_vector(self, tau: float) -> np.ndarray:
        if self.f_spec is None:
            raise PipelineError("missing-modality: vocal")
        sim = np.exp(-self.f_mfcc_dist / max(tau, 1e-12))
        return np.concatenate([self.f_spec, self.f_amp, sim]).astype(np.float32)

    def ultra_vector(self) -> np.ndarray:
        if self.f_ultra_spec is None:
            raise PipelineError("missing-modality: ultrasonic")
        return np.concatenate([self.f_ultra_spec, self.f_ultra_stats]).astype(np.float32)

    def imu_vector(self) -> np.ndarray:
        if self.f_imu is None:
            raise PipelineError("missing-modality: imu")
        return self.f_imu.astype(np.float32)
