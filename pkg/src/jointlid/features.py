"""Log-mel front end, cropping, global normalization and WAV I/O."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    win_length: int = 400
    hop_length: int = 160
    n_fft: int = 512
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-6
    mel_scale: str = "htk"  # or "slaney"
    log_base: str = "e"  # or "10"
    crop_seconds: float = 3.0
    normalize: bool = True

    def __post_init__(self):
        if self.mel_scale not in ("htk", "slaney"):
            raise ValueError(f"mel_scale must be 'htk' or 'slaney', got {self.mel_scale!r}")
        if self.log_base not in ("e", "10"):
            raise ValueError(f"log_base must be 'e' or '10', got {self.log_base!r}")
        if self.win_length > self.n_fft:
            raise ValueError("win_length must not exceed n_fft")

    @property
    def frame_hop_s(self) -> float:
        return self.hop_length / self.sample_rate

    @property
    def crop_frames(self) -> int:
        return int(round(self.crop_seconds / self.frame_hop_s))


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000
    source_id: str = ""


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, F)
    frame_hop_s: float = 0.01
    source_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f, scale: str = "htk"):
    f = np.asarray(f, dtype=np.float64)
    if scale == "htk":
        return 2595.0 * np.log10(1.0 + f / 700.0)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        f >= min_log_hz,
        min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
        f / f_sp,
    )


def mel_to_hz(m, scale: str = "htk"):
    m = np.asarray(m, dtype=np.float64)
    if scale == "htk":
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_edges(cfg: FeatureConfig) -> np.ndarray:
    """The n_mels + 2 band edges in Hz; filter k peaks at ``edges[k + 1]``."""
    lo, hi = hz_to_mel([cfg.f_min, cfg.f_max], cfg.mel_scale)
    return mel_to_hz(np.linspace(lo, hi, cfg.n_mels + 2), cfg.mel_scale)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters, unit peak, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_edges(cfg)
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs[None, :] - lower) / (center - lower)
    fall = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rise, fall))


def num_frames(num_samples: int, cfg: FeatureConfig) -> int:
    return 1 + (num_samples - cfg.win_length) // cfg.hop_length


def logmel(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> FeatureSequence:
    """Hann-windowed power spectrum -> mel filterbank -> log(energy + floor)."""
    if w.sample_rate != cfg.sample_rate:
        raise AudioFormatError(f"sample rate {w.sample_rate} Hz, expected {cfg.sample_rate} Hz")
    x = np.asarray(w.samples, dtype=np.float64)
    if x.ndim != 1:
        raise AudioFormatError(f"expected mono samples, got shape {x.shape}")
    if x.size < cfg.win_length:
        raise AudioFormatError(f"waveform has {x.size} samples, need at least {cfg.win_length}")
    T = num_frames(x.size, cfg)
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(T)[:, None]
    window = np.hanning(cfg.win_length + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(x[idx] * window, n=cfg.n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    energy = power @ mel_filterbank(cfg).T
    logged = np.log(energy + cfg.log_floor)
    if cfg.log_base == "10":
        logged /= np.log(10.0)
    return FeatureSequence(
        frames=logged.astype(np.float32), frame_hop_s=cfg.frame_hop_s, source_id=w.source_id
    )


def repeat_pad(f: FeatureSequence, length: int) -> FeatureSequence:
    """Tile the sequence from its start until it has ``length`` frames."""
    if f.num_frames == 0:
        raise ValueError("cannot pad an empty feature sequence")
    if f.num_frames >= length:
        return f
    idx = np.arange(length) % f.num_frames
    return FeatureSequence(f.frames[idx], f.frame_hop_s, f.source_id)


def random_crop(
    f: FeatureSequence, rng: np.random.Generator, duration_s: float = 3.0
) -> FeatureSequence:
    """Uniformly placed window of ``duration_s``; shorter inputs are repeat-padded."""
    if f.num_frames == 0:
        raise ValueError("cannot crop an empty feature sequence")
    n = int(round(duration_s / f.frame_hop_s))
    if f.num_frames <= n:
        return repeat_pad(f, n)
    start = int(rng.integers(0, f.num_frames - n + 1))
    return FeatureSequence(f.frames[start:start + n], f.frame_hop_s, f.source_id)


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_sequences(cls, seqs) -> "FeatureStats":
        stacked = np.concatenate([np.asarray(s.frames, dtype=np.float64) for s in seqs], axis=0)
        return cls(
            mean=stacked.mean(axis=0).astype(np.float32),
            std=stacked.std(axis=0).astype(np.float32),
        )


STD_FLOOR = 1e-5


def normalize_features(f: FeatureSequence, stats: FeatureStats) -> FeatureSequence:
    if stats.mean.shape != (f.num_bins,) or stats.std.shape != (f.num_bins,):
        raise ValueError(
            f"stats have {stats.mean.shape[0]} bins, features have {f.num_bins}"
        )
    out = (f.frames - stats.mean) / np.maximum(stats.std, STD_FLOOR)
    return FeatureSequence(out.astype(np.float32), f.frame_hop_s, f.source_id)


def read_wav(path: str | Path) -> Waveform:
    """Mono 16-bit PCM WAV -> float samples in [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            if fh.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compressed WAV ({fh.getcomptype()}) unsupported")
            if channels != 1:
                raise AudioFormatError(f"{path}: {channels} channels, expected mono")
            if width != 2:
                raise AudioFormatError(f"{path}: {8 * width}-bit samples, expected PCM16")
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return Waveform(samples=samples, sample_rate=rate, source_id=str(path))


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.astype("<i2").tobytes())
