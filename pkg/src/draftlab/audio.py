"""PCM WAV ingestion and log-mel filterbank features."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CorruptFileError, SequenceTooShortError, UnsupportedFormatError


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window: float = 0.025
    hop: float = 0.010
    n_mels: int = 80
    mel_floor: float = 1e-10
    n_fft: int = 512

    def __post_init__(self):
        if not (self.window >= self.hop > 0):
            raise ConfigurationError(f"need window >= hop > 0, got window={self.window}, hop={self.hop}")
        if self.n_mels < 1:
            raise ConfigurationError("n_mels must be >= 1")

    @property
    def win_length(self) -> int:
        return int(round(self.window * self.sample_rate))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop * self.sample_rate))


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read 16-bit mono PCM; samples are scaled to [-1, 1) by 1/32768."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise UnsupportedFormatError(f"{path}: missing RIFF/WAVE header")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise CorruptFileError(f"{path}: fmt chunk is {len(body)} bytes, expected >= 16")
            fmt = struct.unpack_from("<HHIIHH", body)
        elif cid == b"data":
            if len(body) != size:
                raise CorruptFileError(
                    f"{path}: data chunk declares {size} bytes but only {len(body)} are present")
            data = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise CorruptFileError(f"{path}: no fmt chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise UnsupportedFormatError(f"{path}: audio_format={audio_format} (only PCM=1 supported)")
    if channels != 1:
        raise UnsupportedFormatError(f"{path}: num_channels={channels} (only mono supported)")
    if bits != 16:
        raise UnsupportedFormatError(f"{path}: bits_per_sample={bits} (only 16 supported)")
    if data is None:
        raise CorruptFileError(f"{path}: no data chunk")
    if len(data) % 2:
        raise CorruptFileError(f"{path}: odd data length {len(data)} for 16-bit samples")
    samples = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    return samples, int(rate)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape [n_fft//2+1, n_mels]."""
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    up = (freqs[:, None] - lo) / (mid - lo)
    down = (hi - freqs[:, None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_centers(cfg: FeatureConfig) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))[1:-1]


def frame_count(n_samples: int, cfg: FeatureConfig) -> int:
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def log_mel(samples: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log mel-filterbank energies of the power spectrum, shape [T, n_mels]."""
    x = np.asarray(samples, dtype=np.float64)
    win, hop = cfg.win_length, cfg.hop_length
    if len(x) < win:
        raise SequenceTooShortError(f"need at least {win} samples for one frame, got {len(x)}")
    t = frame_count(len(x), cfg)
    idx = np.arange(t)[:, None] * hop + np.arange(win)[None, :]
    frames = x[idx] * np.hanning(win + 1)[:-1]
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    return np.log(cfg.mel_floor + power @ mel_filterbank(cfg)).astype(np.float32)
