"""Synthetic data generator for cross-device gesture sensing scenarios.

A session records one user holding one hand gesture while speaking ten
voice commands. Six synchronized 48 kHz microphones (ear-worn outer/inner
pairs, watch, ring) pick up the speech and the watch's always-on ultrasonic
chirp; a 200 Hz IMU rides on the ring finger. Each gesture owns an acoustic
signature (per-channel voice attenuation, occlusion lowpass, voice and
chirp path delays) and a terminal hand attitude, all perturbed per user.

The generator is fully deterministic given (master seed, user, gesture) and
writes every hidden truth (clap time, IMU clock offset, utterance windows,
path parameters) alongside the signals so tests can score the pipeline
against it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps
from scipy.spatial.transform import Rotation

from . import fmcw
from .config import SimConfig, ChirpConfig
from .types import CHANNEL_ORDER, AudioSegment, ImuStream, PipelineError

N_GESTURES = 9

# -- gesture acoustic table --------------------------------------------------
# Ear-mic voice paths are head geometry, fixed across gestures.
_EAR_DELAY_MS = {"le_outer": 0.45, "le_inner": 0.50, "re_outer": 0.45, "re_inner": 0.50}
_EAR_ATTEN_DB = {"le_outer": 4.0, "le_inner": 10.0, "re_outer": 4.0, "re_inner": 10.0}
_INNER_CUTOFF = {"le_inner": 5000.0, "re_inner": 5000.0}
_NO_OCCLUSION = 21_000.0  # sentinel: above the audio band, filter skipped

# per gesture: extra voice attenuation on (le_o, le_i, re_o, re_i),
# watch/ring voice (delay ms, atten db), occlusion cutoffs, chirp path
# (delay ms, atten db) per channel in CHANNEL_ORDER, terminal attitude
# (roll, pitch, yaw degrees).
_G = {
    0: dict(ear_extra=(0, 0, 3, 2), watch=(0.55, 6), ring=(0.50, 6),
            cutoffs={"re_outer": 7000},
            chirp_d=(0.95, 1.00, 0.15, 0.20, 0.05, 0.10),
            chirp_a=(8, 12, 2, 5, 0, 2), attitude=(55, 10, -20)),
    1: dict(ear_extra=(0, 0, 2, 1), watch=(0.50, 5), ring=(0.40, 4),
            cutoffs={"re_outer": 9000},
            chirp_d=(0.70, 0.75, 0.30, 0.35, 0.05, 0.15),
            chirp_a=(6, 9, 3, 6, 0, 2), attitude=(45, -15, 25)),
    2: dict(ear_extra=(0, 0, 4, 2), watch=(0.45, 4), ring=(0.35, 3),
            cutoffs={"re_outer": 6000},
            chirp_d=(0.80, 0.85, 0.25, 0.30, 0.05, 0.20),
            chirp_a=(7, 10, 4, 7, 0, 3), attitude=(30, 25, 10)),
    3: dict(ear_extra=(6, 3, 6, 3), watch=(0.50, 3), ring=(0.25, 0),
            cutoffs={"le_outer": 1800, "le_inner": 1800, "re_outer": 1800,
                     "re_inner": 1800, "watch": 2000, "ring": 2500},
            chirp_d=(0.60, 0.65, 0.60, 0.65, 0.05, 0.12),
            chirp_a=(5, 8, 5, 8, 0, 1), attitude=(75, 0, 0)),
    4: dict(ear_extra=(0, 0, 12, 8), watch=(0.55, 6), ring=(0.50, 5),
            cutoffs={"re_outer": 1500, "re_inner": 2000},
            chirp_d=(1.00, 1.05, 0.12, 0.18, 0.05, 0.10),
            chirp_a=(9, 12, 3, 5, 0, 2), attitude=(40, 45, -15)),
    5: dict(ear_extra=(1, 0, 1, 0), watch=(0.50, 4), ring=(0.30, 2),
            cutoffs={},
            chirp_d=(0.75, 0.80, 0.75, 0.80, 0.05, 0.15),
            chirp_a=(7, 10, 7, 10, 0, 2), attitude=(60, -25, -10)),
    6: dict(ear_extra=(9, 5, 0, 0), watch=(0.50, 3), ring=(0.30, 1),
            cutoffs={"le_outer": 2500, "le_inner": 3000},
            chirp_d=(1.10, 1.15, 0.45, 0.50, 0.05, 0.12),
            chirp_a=(11, 14, 4, 7, 0, 1), attitude=(65, 20, 30)),
    7: dict(ear_extra=(5, 2, 5, 2), watch=(0.50, 4), ring=(0.20, 0),
            cutoffs={"le_outer": 2800, "le_inner": 3200, "re_outer": 2800,
                     "re_inner": 3200, "watch": 2600, "ring": 3000},
            chirp_d=(0.62, 0.67, 0.62, 0.67, 0.05, 0.10),
            chirp_a=(6, 9, 6, 9, 0, 1), attitude=(72, -10, 15)),
    8: dict(ear_extra=(0, 0, 0, 0), watch=(2.60, 12), ring=(2.40, 14),
            cutoffs={},
            chirp_d=(2.60, 2.65, 2.60, 2.65, 0.05, 0.30),
            chirp_a=(16, 19, 16, 19, 0, 5), attitude=(0, 0, 0)),
}

# which gesture pairs get pulled together per modality in confusable mode
_CONFUSABLE_PAIRS = {
    "voice": ((3, 7), (0, 4), (2, 5)),
    "ultra": ((0, 1), (2, 6), (4, 5)),
    "imu": ((1, 2), (5, 6)),
}


@dataclass
class GestureAcousticModel:
    """Per-channel propagation parameters for one (gesture, user)."""

    voice_delay_s: dict[str, float]
    voice_atten_db: dict[str, float]
    voice_cutoff_hz: dict[str, float]
    chirp_delay_s: dict[str, float]
    chirp_atten_db: dict[str, float]
    attitude_deg: tuple[float, float, float]


@dataclass
class UserTraits:
    gain_db: dict[str, float]
    delay_ms: dict[str, float]
    f0: float
    attitude_bias_deg: np.ndarray


@dataclass
class SessionPlan:
    user_id: int
    label: int
    commands: list[int]
    posture: str
    master_seed: int


@dataclass
class SessionData:
    channels: dict[str, AudioSegment]
    imu: ImuStream
    ticks: list[float]
    meta: dict
    truth: dict = field(default_factory=dict)


def _rng(master_seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed)] + [int(t) for t in tags]))


def _chirp_taper(t: np.ndarray, period: float, width: float = 1e-3) -> np.ndarray:
    """Raised-cosine dip at every sweep wrap. The sawtooth sweep's frequency
    jump is a derivative discontinuity that would otherwise click broadband
    into the vocal band (and be audible on real hardware)."""
    tau = np.mod(t, period)
    env = np.ones_like(tau)
    head = tau < width
    env[head] = 0.5 - 0.5 * np.cos(np.pi * tau[head] / width)
    tail = tau > period - width
    env[tail] = 0.5 - 0.5 * np.cos(np.pi * (period - tau[tail]) / width)
    return env


def user_traits(master_seed: int, user_id: int) -> UserTraits:
    rng = _rng(master_seed, 101, user_id)
    return UserTraits(
        gain_db={c: float(rng.uniform(-3, 3)) for c in CHANNEL_ORDER},
        delay_ms={c: float(rng.uniform(-0.2, 0.2)) for c in CHANNEL_ORDER},
        f0=float(rng.uniform(105.0, 230.0)),
        attitude_bias_deg=rng.uniform(-5.0, 5.0, size=3),
    )


def _gesture_params(label: int, confusable: bool, shrink: float) -> dict:
    """Raw per-gesture table values, optionally blended toward a paired
    gesture so single modalities become ambiguous."""
    if label not in _G:
        raise PipelineError(f"bad-label: {label}")
    base = {k: np.array(v, dtype=float) if isinstance(v, tuple) else dict(v)
            for k, v in _G[label].items()}
    if not confusable:
        return base

    def blend(a, b):
        mid = (a + b) / 2.0
        return mid + shrink * (a - mid)

    for modality, keys in (
        ("voice", ("ear_extra", "watch", "ring")),
        ("ultra", ("chirp_d", "chirp_a")),
        ("imu", ("attitude",)),
    ):
        for pa, pb in _CONFUSABLE_PAIRS[modality]:
            if label not in (pa, pb):
                continue
            other = pb if label == pa else pa
            for key in keys:
                mine = np.array(_G[label][key], dtype=float)
                theirs = np.array(_G[other][key], dtype=float)
                base[key] = blend(mine, theirs)
            if modality == "voice":
                mine_c = {c: _G[label]["cutoffs"].get(c, _NO_OCCLUSION) for c in CHANNEL_ORDER}
                their_c = {c: _G[other]["cutoffs"].get(c, _NO_OCCLUSION) for c in CHANNEL_ORDER}
                blended = {c: float(blend(np.array(mine_c[c]), np.array(their_c[c])))
                           for c in CHANNEL_ORDER}
                base["cutoffs"] = {c: v for c, v in blended.items() if v < 20_000.0}
    return base


def acoustic_model(label: int, traits: UserTraits, confusable: bool = False,
                   shrink: float = 0.35) -> GestureAcousticModel:
    g = _gesture_params(label, confusable, shrink)
    ear_extra = {c: float(g["ear_extra"][i]) for i, c in enumerate(CHANNEL_ORDER[:4])}
    floor_s = 2e-5  # delays stay physical under the per-user jitter
    voice_delay = {}
    voice_atten = {}
    for c in CHANNEL_ORDER[:4]:
        voice_delay[c] = max((_EAR_DELAY_MS[c] + traits.delay_ms[c]) * 1e-3, floor_s)
        voice_atten[c] = max(_EAR_ATTEN_DB[c] + ear_extra[c] + traits.gain_db[c], 0.0)
    for c, row in (("watch", g["watch"]), ("ring", g["ring"])):
        voice_delay[c] = max((float(row[0]) + traits.delay_ms[c]) * 1e-3, floor_s)
        voice_atten[c] = max(float(row[1]) + traits.gain_db[c], 0.0)
    cutoffs = {}
    for c in CHANNEL_ORDER:
        occ = float(g["cutoffs"].get(c, _NO_OCCLUSION)) if isinstance(g["cutoffs"], dict) else _NO_OCCLUSION
        cutoffs[c] = min(occ, _INNER_CUTOFF.get(c, _NO_OCCLUSION))
    chirp_delay = {c: max((float(g["chirp_d"][i]) + traits.delay_ms[c]) * 1e-3, floor_s)
                   for i, c in enumerate(CHANNEL_ORDER)}
    chirp_atten = {c: max(float(g["chirp_a"][i]) + traits.gain_db[c], 0.0)
                   for i, c in enumerate(CHANNEL_ORDER)}
    att = np.array(g["attitude"], dtype=float) + traits.attitude_bias_deg
    return GestureAcousticModel(
        voice_delay_s=voice_delay,
        voice_atten_db=voice_atten,
        voice_cutoff_hz=cutoffs,
        chirp_delay_s=chirp_delay,
        chirp_atten_db=chirp_atten,
        attitude_deg=tuple(float(a) for a in att),
    )


# ---------------------------------------------------------------------------
# voice synthesis
# ---------------------------------------------------------------------------

def synth_voice(command_id: int, duration: float, f0: float, rate: int,
                rng: np.random.Generator) -> np.ndarray:
    """Formant-like pseudo-speech, unit RMS, deterministic per inputs.

    The syllable layout and formant targets come from a command-keyed RNG so
    a command sounds alike across users; f0 and timing jitter are the
    speaker's. Energy lives in 100-6000 Hz; onsets/offsets ramp within 40 ms.
    """
    if not 1.5 <= duration <= 3.5:
        raise PipelineError(f"bad-duration: {duration} s outside [1.5, 3.5]")
    tpl = _rng(0xC0FFEE, command_id)
    n_syll = int(tpl.integers(3, 7))
    formants = np.stack([
        tpl.uniform(300, 900, n_syll),
        tpl.uniform(1000, 2400, n_syll),
        tpl.uniform(2500, 3400, n_syll),
    ], axis=1)
    sdur = tpl.uniform(0.12, 0.28, n_syll)
    gaps = tpl.uniform(0.03, 0.07, n_syll)
    gaps[-1] = 0.0  # voicing runs to the nominal end; no trailing gap
    stretch = duration / float(sdur.sum() + gaps.sum())
    sdur = sdur * stretch
    gaps = gaps * stretch

    out = np.zeros(int(round(duration * rate)))
    pos = 0.0
    for k in range(n_syll):
        n = int(round(sdur[k] * rate))
        if n < 8:
            pos += sdur[k] + gaps[k]
            continue
        t = np.arange(n) / rate
        f0_k = f0 * (1.0 + rng.uniform(-0.08, 0.08)) * (1.0 + 0.02 * np.sin(2 * np.pi * 5.0 * t))
        phase = np.cumsum(f0_k) / rate
        source = 2.0 * (phase % 1.0) - 1.0  # sawtooth glottal source
        source = source + 0.05 * rng.normal(size=n)
        syl = source
        for f in formants[k]:
            b, a = sps.iirpeak(f, Q=6.0, fs=rate)
            syl = sps.lfilter(b, a, syl)
        ramp = min(int(0.04 * rate), n // 3)
        env = np.ones(n)
        env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[-ramp:] = env[:ramp][::-1]
        r = np.sqrt(np.mean(syl ** 2))
        if r > 0:
            syl = syl / r
        start = int(round(pos * rate))
        stop = min(start + n, len(out))
        out[start:stop] += (syl * env)[: stop - start]
        pos += sdur[k] + gaps[k]

    sos = sps.butter(4, [100.0, 6000.0], btype="bandpass", fs=rate, output="sos")
    out = sps.sosfilt(sos, out)
    r = np.sqrt(np.mean(out ** 2))
    return out / r if r > 0 else out


# ---------------------------------------------------------------------------
# IMU synthesis
# ---------------------------------------------------------------------------

def _min_jerk(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return 10 * u ** 3 - 15 * u ** 4 + 6 * u ** 5


def gesture_profile(t: np.ndarray, events: list[tuple[float, float, float, float]]) -> np.ndarray:
    """Hand-at-gesture fraction s(t) in [0, 1]: minimum-jerk reach, hold,
    minimum-jerk release per (reach_start, hold_start, hold_end, release_end)."""
    s = np.zeros_like(t)
    for r0, h0, h1, r1 in events:
        up = (t >= r0) & (t < h0)
        s[up] = _min_jerk((t[up] - r0) / max(h0 - r0, 1e-6))
        s[(t >= h0) & (t < h1)] = 1.0
        down = (t >= h1) & (t < r1)
        s[down] = 1.0 - _min_jerk((t[down] - h1) / max(r1 - h1, 1e-6))
    return s


def synth_imu(duration: float, rate: int, events, attitude_deg, clap_time: float,
              imu_offset: float, rng: np.random.Generator) -> ImuStream:
    """IMU trace: slerp from rest to the gesture attitude along the event
    profile, gravity rotated into the sensor frame, reach bumps, tremor, and
    a clap spike. Stored timestamps lag the audio clock by imu_offset."""
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    s = gesture_profile(t, events)

    rotvec_full = Rotation.from_euler("xyz", attitude_deg, degrees=True).as_rotvec()
    tremor = np.stack([
        np.convolve(rng.normal(scale=0.02, size=n), np.ones(25) / 25, mode="same")
        for _ in range(3)
    ], axis=1)
    rotvec = s[:, None] * rotvec_full[None, :] + tremor
    rots = Rotation.from_rotvec(rotvec)
    quat_xyzw = rots.as_quat()
    quat = np.column_stack([quat_xyzw[:, 3], quat_xyzw[:, :3]])

    # body rates from successive relative rotations
    rel = (rots[:-1].inv() * rots[1:]).as_rotvec() * rate
    gyro = np.vstack([rel, rel[-1:]])

    grav = rots.inv().apply(np.array([0.0, 0.0, 9.81]))
    ds = np.gradient(s, 1.0 / rate)
    bump_dir = np.array([0.6, -0.3, 0.2])
    accel = grav + np.abs(ds)[:, None] * bump_dir[None, :] * 1.5
    accel = accel + rng.normal(scale=0.05, size=(n, 3))

    # sharp-onset spike so clap refinement lands on the first sample
    spike = np.zeros(n)
    k0 = int(round(clap_time * rate))
    kw = max(int(0.04 * rate), 2)
    if 0 <= k0 < n - kw:
        spike[k0: k0 + kw] = 25.0 * np.exp(-np.arange(kw) / (0.008 * rate))
    accel = accel + spike[:, None] * np.array([0.7, 0.5, 0.3])[None, :]

    return ImuStream(t - imu_offset, accel, gyro, quat)


# ---------------------------------------------------------------------------
# session assembly
# ---------------------------------------------------------------------------

def plan_dataset(cfg: SimConfig, master_seed: int) -> list[SessionPlan]:
    plans = []
    for user in range(cfg.n_users):
        for label in range(N_GESTURES):
            rng = _rng(master_seed, 202, user, label)
            commands = sorted(rng.choice(cfg.n_commands, size=cfg.commands_per_session,
                                         replace=False).tolist())
            posture = "sitting" if rng.random() < 0.5 else "standing"
            plans.append(SessionPlan(user, label, [int(c) for c in commands],
                                     posture, master_seed))
    return plans


def simulate_session(plan: SessionPlan, cfg: SimConfig,
                     chirp: ChirpConfig | None = None) -> SessionData:
    chirp = chirp or ChirpConfig()
    rate = cfg.audio_rate
    traits = user_traits(plan.master_seed, plan.user_id)
    gam = acoustic_model(plan.label, traits, cfg.confusable, cfg.confusable_shrink)
    rest = acoustic_model(8, traits, False)
    rng_t = _rng(plan.master_seed, 303, plan.user_id, plan.label, 0)
    rng_v = _rng(plan.master_seed, 303, plan.user_id, plan.label, 1)
    rng_n = _rng(plan.master_seed, 303, plan.user_id, plan.label, 2)
    rng_i = _rng(plan.master_seed, 303, plan.user_id, plan.label, 3)

    # -- timeline ---------------------------------------------------------
    t_clap = 0.55 + rng_t.uniform(-0.05, 0.05)
    ticks = []
    utterances = []  # (start, end, command)
    cursor = t_clap + 0.7
    for k, cmd in enumerate(plan.commands):
        ticks.append(cursor)
        start = cursor + 0.55 + rng_t.uniform(0.0, 0.1)
        dur = rng_t.uniform(1.6, 2.4)
        utterances.append((start, start + dur, cmd))
        cursor = start + dur + rng_t.uniform(0.55, 0.75)
    duration = utterances[-1][1] + 0.7
    n = int(round(duration * rate))
    t = np.arange(n) / rate

    # -- hand motion profile (shared by chirp paths and the IMU) -----------
    events = []
    for (start, end, _cmd), tick in zip(utterances, ticks):
        events.append((tick + 0.05, start - 0.05, end + 0.1, end + 0.5))
    s_coarse_t = np.arange(int(duration * 400)) / 400.0
    s_coarse = gesture_profile(s_coarse_t, events)

    # -- dry voice track ----------------------------------------------------
    voice = np.zeros(n)
    gains = []
    for start, end, cmd in utterances:
        utt = synth_voice(cmd, end - start, traits.f0, rate, rng_v)
        g = cfg.speech_level * 10 ** (rng_v.uniform(-2, 2) / 20.0)
        gains.append(float(g))
        i0 = int(round(start * rate))
        u = utt[: max(0, n - i0)]
        voice[i0: i0 + len(u)] += g * u

    # -- clap ---------------------------------------------------------------
    # hot enough to clip, like a real clap next to a mic; keeps the sync
    # envelope far above speech under every per-user gain draw
    clap = np.zeros(n)
    kc = int(round(t_clap * rate))
    kw = int(0.012 * rate)
    clap_rng = _rng(plan.master_seed, 303, plan.user_id, plan.label, 4)
    clap[kc: kc + kw] = 1.8 * clap_rng.normal(size=kw) * np.exp(-np.arange(kw) / (0.003 * rate))

    speech_mask = np.zeros(n, dtype=bool)
    for start, end, _cmd in utterances:
        speech_mask[int(start * rate): int(end * rate)] = True

    channels = {}
    s_audio = np.interp(t, s_coarse_t, s_coarse)
    for ch in CHANNEL_ORDER:
        # voice path: integer-sample delay, attenuation, occlusion lowpass
        d = max(0, int(round(gam.voice_delay_s[ch] * rate)))
        v = np.zeros(n)
        v[d:] = voice[: n - d]
        v *= 10 ** (-gam.voice_atten_db[ch] / 20.0)
        cutoff = gam.voice_cutoff_hz[ch]
        if cutoff < 20_000.0:
            sos = sps.butter(4, cutoff, btype="lowpass", fs=rate, output="sos")
            v = sps.sosfilt(sos, v)

        # chirp path: delay/attenuation morph between rest and gesture pose
        d_path = rest.chirp_delay_s[ch] + s_audio * (gam.chirp_delay_s[ch] - rest.chirp_delay_s[ch])
        a_path = rest.chirp_atten_db[ch] + s_audio * (gam.chirp_atten_db[ch] - rest.chirp_atten_db[ch])
        c = (cfg.chirp_level * 10 ** (-a_path / 20.0)
             * fmcw.chirp_waveform(t - d_path, chirp)
             * _chirp_taper(t - d_path, chirp.period))

        speech_rms = float(np.sqrt(np.mean(v[speech_mask] ** 2))) if speech_mask.any() else 0.0
        sigma = max(speech_rms, 1e-4) / 10 ** (cfg.snr_db / 20.0)
        x = v + c + clap + rng_n.normal(scale=sigma, size=n)
        channels[ch] = AudioSegment(np.clip(x, -0.999, 0.999), rate)

    imu_offset = float(rng_i.uniform(-0.2, 0.2))
    imu = synth_imu(duration, cfg.imu_rate, events, gam.attitude_deg, t_clap,
                    imu_offset, rng_i)

    meta = {
        "user_id": plan.user_id,
        "label": plan.label,
        "commands": list(plan.commands),
        "posture": plan.posture,
        "confusable": bool(cfg.confusable),
        "master_seed": plan.master_seed,
    }
    truth = {
        "clap_time": float(t_clap),
        "imu_offset": imu_offset,
        "ticks": [float(x) for x in ticks],
        "utterances": [
            {"start": float(a), "end": float(b), "command": int(c), "gain": gains[i]}
            for i, (a, b, c) in enumerate(utterances)
        ],
        "voice_delay_s": {c: float(v) for c, v in gam.voice_delay_s.items()},
        "voice_atten_db": {c: float(v) for c, v in gam.voice_atten_db.items()},
        "voice_cutoff_hz": {c: float(v) for c, v in gam.voice_cutoff_hz.items()},
        "chirp_delay_s": {c: float(v) for c, v in gam.chirp_delay_s.items()},
        "chirp_atten_db": {c: float(v) for c, v in gam.chirp_atten_db.items()},
        "rest_chirp_delay_s": {c: float(v) for c, v in rest.chirp_delay_s.items()},
        "attitude_deg": [float(a) for a in gam.attitude_deg],
        "f0": traits.f0,
    }
    return SessionData(channels=channels, imu=imu, ticks=[float(x) for x in ticks],
                       meta=meta, truth=truth)
