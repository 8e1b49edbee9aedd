"""Deterministic signal processing shared by every stage of the pipeline.

Framing convention: frame ``i`` is centred on sample ``i * hop`` of the
original signal, the signal is zero padded by ``n_fft // 2`` on the left and
as much as needed on the right, and a signal of ``N`` samples yields
``ceil(N / hop)`` frames.  Mel spectrograms, linear spectrograms, F0
contours and all learned front-ends follow this convention so that frame
indices agree across modules.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-5


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise AudioError("waveform must be a non-empty mono signal")
        if not np.all(np.isfinite(samples)):
            raise AudioError("waveform contains non-finite samples")
        if np.max(np.abs(samples)) > 1.0 + 1e-6:
            raise AudioError("waveform samples must lie in [-1, 1]")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise AudioError("sample_rate must be a positive integer")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float | None = None

    def validate(self):
        if not (self.hop_length > 0 and self.win_length >= self.hop_length):
            raise AudioError("mel config requires win_length >= hop_length > 0")
        if self.n_fft < self.win_length:
            raise AudioError("n_fft must be >= win_length")
        if self.n_mels < 1:
            raise AudioError("n_mels must be >= 1")

    @property
    def fmax(self) -> float:
        return self.f_max if self.f_max is not None else self.sample_rate / 2


@dataclass(frozen=True)
class F0Config:
    sample_rate: int = 16000
    hop_length: int = 256
    frame_length: int = 1024
    f0_min: float = 60.0
    f0_max: float = 500.0
    # voiced iff 1 - min(CMNDF) >= voicing_threshold
    voicing_threshold: float = 0.8
    min_rms: float = 1e-4

    def validate(self):
        if not (40.0 <= self.f0_min < self.f0_max <= 1000.0):
            raise AudioError("F0 bounds must satisfy 40 <= f0_min < f0_max <= 1000")
        if self.sample_rate / self.f0_min >= self.frame_length:
            raise AudioError("frame_length too short for f0_min")


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # (T, M)
    hop_length: int
    sample_rate: int

    def __post_init__(self):
        if self.frames.ndim != 2 or min(self.frames.shape) < 1:
            raise AudioError("mel spectrogram must be a non-empty T x M matrix")
        if not np.all(np.isfinite(self.frames)):
            raise AudioError("mel spectrogram has non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class F0Contour:
    values: np.ndarray
    voiced: np.ndarray = field(default=None)
    hop_length: int = 256

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        voiced = values > 0 if self.voiced is None else np.asarray(self.voiced, dtype=bool)
        if values.ndim != 1 or values.shape != voiced.shape:
            raise AudioError("F0 values and voicing mask must be 1-D and equal length")
        if not np.array_equal(values > 0, voiced):
            raise AudioError("F0 values must be > 0 exactly on voiced frames")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "voiced", voiced)

    def __len__(self):
        return self.values.size

    @property
    def n_voiced(self) -> int:
        return int(self.voiced.sum())


# --------------------------------------------------------------------------
# framing and spectra


def num_frames(n_samples: int, hop_length: int) -> int:
    return math.ceil(n_samples / hop_length)


def frame_signal(x: np.ndarray, frame_length: int, hop_length: int) -> np.ndarray:
    """Centred frames of ``x``, shape ``(ceil(len(x)/hop), frame_length)``."""
    n = x.shape[-1]
    t = num_frames(n, hop_length)
    left = frame_length // 2
    total = (t - 1) * hop_length + frame_length
    padded = np.zeros(total, dtype=np.float64)
    keep = min(n, total - left)
    padded[left:left + keep] = x[:keep]
    return np.lib.stride_tricks.sliding_window_view(padded, frame_length)[::hop_length][:t]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: MelConfig) -> np.ndarray:
    points = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.fmax), config.n_mels + 2)
    return mel_to_hz(points)[1:-1]


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """Triangular HTK-style filters with unit peak, shape ``(n_mels, n_fft//2+1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.fmax), config.n_mels + 2))
    freqs = np.fft.rfftfreq(config.n_fft, 1.0 / config.sample_rate)
    lower = edges[:-2, None]
    center = edges[1:-1, None]
    upper = edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def _window(win_length: int, n_fft: int) -> np.ndarray:
    # periodic Hann, centred inside n_fft
    w = np.zeros(n_fft)
    offset = (n_fft - win_length) // 2
    w[offset:offset + win_length] = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win_length) / win_length)
    return w


def _check_length(wav: Waveform, win_length: int):
    if len(wav) < win_length:
        raise AudioError("input too short")


def magnitude_spectrogram(wav: Waveform, config: MelConfig) -> np.ndarray:
    """|STFT| with shape ``(T, n_fft//2+1)``."""
    config.validate()
    _check_length(wav, config.win_length)
    frames = frame_signal(wav.samples, config.n_fft, config.hop_length)
    return np.abs(np.fft.rfft(frames * _window(config.win_length, config.n_fft), axis=-1))


def compute_mel(wav: Waveform, config: MelConfig) -> MelSpectrogram:
    mag = magnitude_spectrogram(wav, config)
    mel = mag @ mel_filterbank(config).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)), config.hop_length, config.sample_rate)


def linear_spectrogram(wav: Waveform, config: MelConfig) -> np.ndarray:
    """Log-magnitude linear-frequency spectrogram, ``(T, n_fft//2+1)``."""
    return np.log(np.maximum(magnitude_spectrogram(wav, config), LOG_FLOOR))


# --------------------------------------------------------------------------
# F0


def _cmndf(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """Cumulative mean normalised difference for lags ``0..tau_max``."""
    n_frames, length = frames.shape
    w = length - tau_max
    n_fft = 1 << int(math.ceil(math.log2(length + w)))
    head = np.fft.rfft(frames[:, :w], n_fft, axis=-1)
    full = np.fft.rfft(frames, n_fft, axis=-1)
    corr = np.fft.irfft(np.conj(head) * full, n_fft, axis=-1)[:, : tau_max + 1]
    sq = np.cumsum(np.concatenate([np.zeros((n_frames, 1)), frames ** 2], axis=1), axis=1)
    energy0 = sq[:, w:w + 1]
    lags = np.arange(tau_max + 1)
    energy_tau = sq[:, lags + w] - sq[:, lags]
    diff = np.maximum(energy0 + energy_tau - 2.0 * corr, 0.0)
    diff[:, 0] = 0.0
    cum = np.cumsum(diff[:, 1:], axis=1)
    out = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = diff[:, 1:] * lags[1:] / cum
    out[:, 1:] = np.where(cum > 1e-12 * max(1.0, float(np.max(energy0))), ratio, 1.0)
    return out


def extract_f0(wav: Waveform, config: F0Config) -> F0Contour:
    """YIN-style F0 track on the shared framing grid.

    A frame is voiced when its best periodicity confidence ``1 - CMNDF``
    reaches ``config.voicing_threshold``, its RMS exceeds ``config.min_rms``
    and the refined estimate lies in ``[f0_min, f0_max]``.
    """
    config.validate()
    sr = wav.sample_rate
    frames = frame_signal(wav.samples, config.frame_length, config.hop_length)
    tau_min = max(2, int(math.floor(sr / config.f0_max)))
    tau_max = int(math.ceil(sr / config.f0_min))
    d = _cmndf(frames, tau_max + 1)
    aperiodic = 1.0 - config.voicing_threshold

    search = d[:, tau_min:tau_max + 1]
    below = search < aperiodic
    has = below.any(axis=1)
    # first dip under threshold, then slide down to its local minimum
    idx = np.where(has, np.argmax(below, axis=1), np.argmin(search, axis=1))
    rows = np.arange(len(idx))
    for _ in range(search.shape[1]):
        nxt = np.minimum(idx + 1, search.shape[1] - 1)
        move = search[rows, nxt] < search[rows, idx]
        if not move.any():
            break
        idx = np.where(move, nxt, idx)
    tau = idx + tau_min
    best = d[rows, tau]

    left = d[rows, tau - 1]
    right = d[rows, tau + 1]
    denom = left - 2 * best + right
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / denom, 0.0)
    shift = np.clip(shift, -1.0, 1.0)
    f0 = sr / (tau + shift)

    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    voiced = (best <= aperiodic) & (rms > config.min_rms)
    voiced &= (f0 >= config.f0_min) & (f0 <= config.f0_max)
    return F0Contour(np.where(voiced, f0, 0.0), voiced, config.hop_length)


def lower_median(x: np.ndarray) -> float:
    """Median; for an even count the lower of the two middle values."""
    s = np.sort(np.asarray(x, dtype=np.float64))
    return float(s[(s.size - 1) // 2])


def shift_f0(src: F0Contour, ref: F0Contour) -> F0Contour:
    """Re-centre the voiced part of ``src`` on the log-median pitch of ``ref``."""
    if src.n_voiced == 0 or ref.n_voiced == 0:
        raise AudioError("cannot shift: no voiced frames")
    log_src = np.log(src.values[src.voiced])
    offset = lower_median(np.log(ref.values[ref.voiced])) - lower_median(log_src)
    out = np.zeros_like(src.values)
    out[src.voiced] = np.exp(log_src + offset)
    return F0Contour(out, src.voiced.copy(), src.hop_length)


# --------------------------------------------------------------------------
# WAV io


def read_wav(path) -> Waveform:
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, sr)


def write_wav(path, wav: Waveform):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), wav.sample_rate, pcm)


def sine(freq: float, duration: float, sample_rate: int = 16000, amplitude: float = 0.5) -> Waveform:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t), sample_rate)
