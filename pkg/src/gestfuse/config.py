"""Pipeline configuration: dataclasses, file I/O and a stable content hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

# Environment variable naming the default dataset root for the CLI.
DATA_ROOT_ENV = "GESTFUSE_DATA_ROOT"


@dataclass
class DspConfig:
    vocal_rate: int = 16_000
    stft_window: int = 512
    stft_hop: int = 192
    n_mels: int = 128
    mel_frames: int = 250
    mel_fmin: float = 0.0
    mel_fmax: float = 8_000.0
    log_floor: float = 1e-10
    n_mfcc: int = 13
    mfcc_window: int = 20
    mfcc_stride: int = 10
    amp_window: int = 200
    amp_stride: int = 200
    amp_frames: int = 250
    band_split_hz: float = 17_500.0
    band_order: int = 8


@dataclass
class ChirpConfig:
    f0: float = 17_500.0
    f1: float = 22_500.0
    period: float = 0.05
    amplitude: float = 1.0

    @property
    def bandwidth(self) -> float:
        return self.f1 - self.f0

    @property
    def slope(self) -> float:
        """Sweep rate B/T in Hz per second."""
        return self.bandwidth / self.period


@dataclass
class FmcwConfig:
    chirp: ChirpConfig = field(default_factory=ChirpConfig)
    lpf_hz: float = 4_000.0
    lpf_order: int = 8
    stft_window: int = 2_048
    stft_hop: int = 512
    spec_bins: int = 128
    spec_frames: int = 250
    log_floor: float = 1e-10


@dataclass
class ExtractorConfig:
    widths: tuple[int, ...] = (8, 16, 32, 64)
    embed_dim: int = 256
    input_pool: tuple[int, int] = (4, 2)
    warm_epochs: int = 5
    warm_batch: int = 8
    warm_lr: float = 0.02
    warm_cap: int = 96
    target_pool: tuple[int, int] = (8, 10)


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 100
    dropout: float = 0.5
    hidden: tuple[int, int] = (512, 512)
    warmup: bool = True
    early_stop: bool = True
    early_stop_loss: float = 2e-2
    early_stop_patience: int = 2
    min_epochs: int = 8


@dataclass
class SimConfig:
    audio_rate: int = 48_000
    imu_rate: int = 200
    n_users: int = 10
    commands_per_session: int = 10
    n_commands: int = 20
    snr_db: float = 30.0
    chirp_level: float = 0.12
    speech_level: float = 0.15
    confusable: bool = False
    confusable_shrink: float = 0.35


@dataclass
class PipelineConfig:
    dsp: DspConfig = field(default_factory=DspConfig)
    fmcw: FmcwConfig = field(default_factory=FmcwConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if dataclasses.is_dataclass(f.type) or f.name in _NESTED:
            kwargs[f.name] = _from_plain(_NESTED[f.name], v)
        elif isinstance(v, list):
            kwargs[f.name] = tuple(v)
        else:
            kwargs[f.name] = v
    return cls(**kwargs)


_NESTED = {
    "dsp": DspConfig,
    "fmcw": FmcwConfig,
    "chirp": ChirpConfig,
    "extractor": ExtractorConfig,
    "train": TrainConfig,
    "sim": SimConfig,
}


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(data: dict) -> PipelineConfig:
    return _from_plain(PipelineConfig, data)


def load_config(path: str | os.PathLike) -> PipelineConfig:
    """Read a config file; JSON always works, YAML if pyyaml is installed."""
    text = Path(path).read_text()
    suffix = Path(path).suffix.lower()
    if suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    return config_from_dict(data or {})


def save_config(cfg: PipelineConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(canonical_json(config_to_dict(cfg)) + "\n")


def canonical_json(data) -> str:
    """Deterministic JSON text: sorted keys, no whitespace drift."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(cfg)).encode()).hexdigest()


def default_data_root() -> str | None:
    return os.environ.get(DATA_ROOT_ENV)
