"""Log-Mel filterbank frontend and the binary feature cache."""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, TooShortError

SAMPLE_RATE = 16000
NUM_BINS = 40

FEAT_MAGIC = b"FKWSFEAT"
FEAT_VERSION = 1


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = SAMPLE_RATE
    frame_length: int = 400  # 25 ms
    frame_shift: int = 160  # 10 ms
    n_fft: int = 512
    num_bins: int = NUM_BINS
    low_freq: float = 20.0
    high_freq: float = 7600.0
    preemphasis: float = 0.97
    log_floor: float = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg=FrontendConfig()):
    """Triangular filters on the one-sided DFT grid, shape [num_bins, n_fft//2 + 1]."""
    mel_pts = np.linspace(hz_to_mel(cfg.low_freq), hz_to_mel(cfg.high_freq), cfg.num_bins + 2)
    hz_pts = mel_to_hz(mel_pts)
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lower, center, upper = hz_pts[:-2, None], hz_pts[1:-1, None], hz_pts[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def mel_centers(cfg=FrontendConfig()):
    """Center frequency in Hz of every filter."""
    mel_pts = np.linspace(hz_to_mel(cfg.low_freq), hz_to_mel(cfg.high_freq), cfg.num_bins + 2)
    return mel_to_hz(mel_pts[1:-1])


def num_frames(num_samples, cfg=FrontendConfig()):
    return (num_samples - cfg.frame_length) // cfg.frame_shift + 1


def compute_fbank(samples, cfg=FrontendConfig()):
    """Log-Mel energies of a waveform, one row per 10 ms frame.

    ``samples`` may be an :class:`~farkws.ingest.AudioClip` or a 1-D array of
    floats in [-1, 1]. Trailing samples that do not complete a frame are
    ignored.
    """
    x = np.asarray(getattr(samples, "samples", samples), dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a mono waveform")
    if len(x) < cfg.frame_length:
        raise TooShortError(f"{len(x)} samples is shorter than one {cfg.frame_length}-sample frame")
    t = num_frames(len(x), cfg)
    x = x[:(t - 1) * cfg.frame_shift + cfg.frame_length]
    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - cfg.preemphasis * x[:-1]
    starts = np.arange(t) * cfg.frame_shift
    frames = emph[starts[:, None] + np.arange(cfg.frame_length)]
    frames = frames * np.hamming(cfg.frame_length)
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor))


def write_features(path, feats):
    feats = np.asarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", FEAT_VERSION, feats.shape[0], feats.shape[1]))
        fh.write(np.ascontiguousarray(feats).tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != FEAT_MAGIC:
        raise FormatError(f"{path}: not a feature cache file")
    version, t, d = struct.unpack_from("<III", blob, 8)
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported feature cache version {version}")
    if len(blob) != 20 + 4 * t * d:
        raise FormatError(f"{path}: truncated feature cache ({len(blob)} bytes for {t}x{d})")
    return np.frombuffer(blob, dtype="<f4", offset=20).reshape(t, d).astype(np.float64)
