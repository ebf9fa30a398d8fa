"""Log-mel filter-bank front end."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"TIDFEAT\x00"


class AudioTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValueError("waveform has no samples")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = 16000
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_fft: int = 512
    num_filters: int = 40
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10

    @property
    def frame_length(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000))

    @property
    def frame_shift(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000))

    def digest(self) -> bytes:
        text = ",".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).digest()[:16]


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, F)
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def num_filters(self) -> int:
        return self.frames.shape[1]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FbankConfig) -> np.ndarray:
    points = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.num_filters + 2)
    return mel_to_hz(points)[1:-1]


def mel_filterbank(cfg: FbankConfig) -> np.ndarray:
    """Triangular filters on the mel scale, shape (num_filters, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.num_filters + 2))
    bins = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (center - lo)
    falling = (hi - bins) / (hi - center)
    return np.maximum(0.0, np.minimum(rising, falling))


_FILTERBANKS: dict[FbankConfig, np.ndarray] = {}


def extract_fbank(wav: Waveform, cfg: FbankConfig = FbankConfig()) -> FeatureMatrix:
    """log(mel(|STFT|^2) + floor) over Hamming-windowed frames."""
    x = np.asarray(wav.samples, dtype=np.float64)
    win, shift = cfg.frame_length, cfg.frame_shift
    if len(x) < win:
        raise AudioTooShortError(f"audio has {len(x)} samples, shorter than one {win}-sample frame")
    n_frames = 1 + (len(x) - win) // shift
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::shift][:n_frames]
    spectrum = np.fft.rfft(frames * np.hamming(win), n=cfg.n_fft)
    power = spectrum.real**2 + spectrum.imag**2
    fb = _FILTERBANKS.get(cfg)
    if fb is None:
        fb = _FILTERBANKS[cfg] = mel_filterbank(cfg)
    energies = power @ fb.T
    return FeatureMatrix(
        np.log(energies + cfg.log_floor).astype(np.float32), cfg.frame_shift_ms, cfg.frame_length_ms
    )


def normalize_utterance(feat: FeatureMatrix, eps: float = 1e-10) -> FeatureMatrix:
    """Zero-mean, unit-variance per feature dimension over the utterance."""
    x = feat.frames.astype(np.float64)
    mu = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), eps)
    out = (x - mu) / np.sqrt(var)
    return FeatureMatrix(out.astype(np.float32), feat.frame_shift_ms, feat.frame_length_ms)


def save_features(path, feat: FeatureMatrix, cfg: FbankConfig = FbankConfig()):
    t, f = feat.frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", t, f))
        fh.write(cfg.digest())
        fh.write(np.ascontiguousarray(feat.frames, dtype="<f4").tobytes())


def load_features(path, cfg: FbankConfig = FbankConfig()) -> FeatureMatrix | None:
    """Read a cached matrix; None if the file was produced under another config."""
    blob = Path(path).read_bytes()
    if not blob.startswith(FEATURE_MAGIC):
        raise ValueError(f"{path}: not a feature cache file")
    pos = len(FEATURE_MAGIC)
    t, f = struct.unpack_from("<II", blob, pos)
    pos += 8
    if blob[pos : pos + 16] != cfg.digest():
        return None
    pos += 16
    frames = np.frombuffer(blob[pos : pos + 4 * t * f], dtype="<f4").reshape(t, f).astype(np.float32)
    return FeatureMatrix(frames, cfg.frame_shift_ms, cfg.frame_length_ms)
