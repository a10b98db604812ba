"""Dataset tree I/O.

Layout under a dataset root:

    user_<id>/session_<label>/          raw session (one per user x gesture)
        le_outer.wav ... ring.wav       48 kHz 16-bit PCM mono per channel
        imu.csv                         t,ax,ay,az,gx,gy,gz,qw,qx,qy,qz
        ticks.json  meta.json  ground_truth.json
    samples/user_<id>/session_<label>/sample_<k>.npz
    features/cache/...                  per-sample primitive cache
    features/bundles_<combo>.npz        per-combo feature bundles (+ .json sidecar)
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .simulate import SessionData
from .types import (AudioSegment, FeatureBundle, GestureSample, ImuStream,
                    PipelineError)

IMU_COLUMNS = "t,ax,ay,az,gx,gy,gz,qw,qx,qy,qz"
_FEATURE_KEYS = ("f_spec", "f_amp", "f_mfcc_dist", "f_ultra_spec", "f_ultra_stats", "f_imu")


# -- raw sessions -------------------------------------------------------------

def session_dir(root: Path | str, user_id: int, label: int) -> Path:
    return Path(root) / f"user_{user_id:02d}" / f"session_{label}"


def write_wav(path: Path, seg: AudioSegment) -> None:
    pcm = np.clip(np.round(seg.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), seg.rate, pcm)


def read_wav(path: Path) -> AudioSegment:
    rate, data = wavfile.read(str(path))
    if data.dtype != np.int16:
        raise PipelineError(f"bad-wav: {path} is not 16-bit PCM")
    return AudioSegment(data.astype(np.float64) / 32767.0, int(rate))


def write_session(root: Path | str, data: SessionData) -> Path:
    out = session_dir(root, data.meta["user_id"], data.meta["label"])
    out.mkdir(parents=True, exist_ok=True)
    for name, seg in data.channels.items():
        write_wav(out / f"{name}.wav", seg)
    imu = data.imu
    mat = np.hstack([imu.t[:, None], imu.accel, imu.gyro, imu.quat])
    np.savetxt(out / "imu.csv", mat, delimiter=",", header=IMU_COLUMNS,
               comments="", fmt="%.8f")
    (out / "ticks.json").write_text(json.dumps(data.ticks))
    (out / "meta.json").write_text(json.dumps(data.meta, sort_keys=True, indent=1))
    if data.truth:
        (out / "ground_truth.json").write_text(json.dumps(data.truth, sort_keys=True, indent=1))
    return out


def read_session(path: Path | str) -> SessionData:
    path = Path(path)
    if not path.is_dir():
        raise PipelineError(f"missing-session: {path}")
    channels = {}
    for wav in sorted(path.glob("*.wav")):
        channels[wav.stem] = read_wav(wav)
    if not channels:
        raise PipelineError(f"missing-session: no wav files under {path}")
    mat = np.loadtxt(path / "imu.csv", delimiter=",", skiprows=1)
    imu = ImuStream(mat[:, 0], mat[:, 1:4], mat[:, 4:7], mat[:, 7:11])
    ticks = json.loads((path / "ticks.json").read_text())
    meta = json.loads((path / "meta.json").read_text())
    truth_file = path / "ground_truth.json"
    truth = json.loads(truth_file.read_text()) if truth_file.exists() else {}
    return SessionData(channels=channels, imu=imu, ticks=ticks, meta=meta, truth=truth)


def list_sessions(root: Path | str) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.glob("user_*/session_*") if p.is_dir())


# -- segmented samples --------------------------------------------------------

def sample_path(root: Path | str, user_id: int, label: int, index: int) -> Path:
    return (Path(root) / "samples" / f"user_{user_id:02d}" / f"session_{label}"
            / f"sample_{index:02d}.npz")


def write_sample(path: Path, sample: GestureSample) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    vocal_rate = next(iter(sample.vocal.values())).rate
    ultra_rate = next(iter(sample.ultra.values())).rate
    meta = {
        "label": sample.label, "user_id": sample.user_id, "session": sample.session,
        "index": sample.index, "command_id": sample.command_id,
        "vocal_rate": vocal_rate, "ultra_rate": ultra_rate,
        "channels": sample.channels,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for ch, seg in sample.vocal.items():
        arrays[f"vocal__{ch}"] = seg.samples.astype(np.float32)
    for ch, seg in sample.ultra.items():
        arrays[f"ultra__{ch}"] = seg.samples.astype(np.float32)
    arrays["imu_t"] = sample.imu.t
    arrays["imu_accel"] = sample.imu.accel.astype(np.float32)
    arrays["imu_gyro"] = sample.imu.gyro.astype(np.float32)
    arrays["imu_quat"] = sample.imu.quat.astype(np.float32)
    np.savez(path, **arrays)


def read_sample(path: Path) -> GestureSample:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        vocal = {}
        ultra = {}
        for key in z.files:
            if key.startswith("vocal__"):
                vocal[key[7:]] = AudioSegment(z[key].astype(np.float64), meta["vocal_rate"])
            elif key.startswith("ultra__"):
                ultra[key[7:]] = AudioSegment(z[key].astype(np.float64), meta["ultra_rate"])
        imu = ImuStream(z["imu_t"].astype(np.float64), z["imu_accel"].astype(np.float64),
                        z["imu_gyro"].astype(np.float64), z["imu_quat"].astype(np.float64))
    return GestureSample(vocal=vocal, ultra=ultra, imu=imu, label=meta["label"],
                         user_id=meta["user_id"], session=meta["session"],
                         index=meta["index"], command_id=meta["command_id"])


def list_sample_paths(root: Path | str) -> list[Path]:
    return sorted((Path(root) / "samples").glob("user_*/session_*/sample_*.npz"))


# -- feature bundles ----------------------------------------------------------

def bundle_path(root: Path | str, combo: str) -> Path:
    return Path(root) / "features" / f"bundles_{combo}.npz"


def write_bundles(path: Path, bundles: list[FeatureBundle], combo: str,
                  config_hash: str = "") -> None:
    if not bundles:
        raise PipelineError("empty-bundle-list")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "labels": np.array([b.label for b in bundles], dtype=np.int64),
        "users": np.array([b.user_id for b in bundles], dtype=np.int64),
        "sessions": np.array([b.session for b in bundles], dtype=np.int64),
        "indices": np.array([b.index for b in bundles], dtype=np.int64),
    }
    for key in _FEATURE_KEYS:
        first = getattr(bundles[0], key)
        if first is None:
            continue
        arrays[key] = np.stack([np.asarray(getattr(b, key), dtype=np.float32)
                                for b in bundles])
    if bundles[0].pair_names:
        arrays["pair_names"] = np.array(bundles[0].pair_names)
    np.savez(path, **arrays)
    sidecar = {
        "combo": combo,
        "config_hash": config_hash,
        "count": len(bundles),
        "vectors": {k: list(arrays[k].shape[1:]) for k in _FEATURE_KEYS if k in arrays},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def read_bundles(path: Path) -> list[FeatureBundle]:
    out = []
    with np.load(path) as z:
        n = len(z["labels"])
        pair_names = [str(s) for s in z["pair_names"]] if "pair_names" in z.files else []
        feats = {k: z[k] for k in _FEATURE_KEYS if k in z.files}
        for i in range(n):
            out.append(FeatureBundle(
                label=int(z["labels"][i]), user_id=int(z["users"][i]),
                session=int(z["sessions"][i]), index=int(z["indices"][i]),
                pair_names=list(pair_names),
                **{k: v[i].astype(np.float64) for k, v in feats.items()},
            ))
    return out


# -- generic primitive cache --------------------------------------------------

def cache_path(root: Path | str, user_id: int, label: int, index: int) -> Path:
    return (Path(root) / "features" / "cache"
            / f"u{user_id:02d}_s{label}_k{index:02d}.npz")


def write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def read_npz(path: Path) -> dict[str, np.ndarray]:
    with np.load(path) as z:
        return {k: z[k] for k in z.files}
