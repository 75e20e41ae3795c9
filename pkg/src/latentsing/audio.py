"""Audio I/O, resampling, and spectrogram extraction.

Canonical model rate is 32 kHz mono. Spectrograms use a centered
(reflect-padded) magnitude STFT, so the frame count for a clip of length
``n`` is ``n // hop + 1``. The mel projection is the reconstruction-loss
target and is exposed both as numpy (analysis) and torch (loss path).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.signal import resample_poly

from .errors import (
    AudioIOError,
    ClipTooShortError,
    MissingFileError,
    NotAWavError,
    UnsupportedBitDepthError,
    ValidationError,
)

MEL_LOG_EPS = 1e-5


@dataclass
class AudioClip:
    """Mono waveform in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValidationError("AudioClip samples must be 1-D (mono)")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("AudioClip samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class LinearSpectrogram:
    """Magnitude STFT, frames x bins, bins = fft_size//2 + 1."""

    values: np.ndarray
    hop: int
    win: int

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


@dataclass
class MelSpectrogram:
    """Log-magnitude mel projection, frames x mel_bins."""

    values: np.ndarray

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def load_wav(path: str | Path) -> AudioClip:
    """Read a PCM16 WAV file; stereo is downmixed by channel averaging.

    Raises MissingFileError / NotAWavError / UnsupportedBitDepthError so
    the CLI can map them to distinct messages.
    """
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"no such file: {p}")
    try:
        with wave.open(str(p), "rb") as wf:
            sampwidth = wf.getsampwidth()
            if sampwidth != 2:
                raise UnsupportedBitDepthError(
                    f"{p}: only PCM16 supported, got {8 * sampwidth}-bit")
            channels = wf.getnchannels()
            if channels not in (1, 2):
                raise AudioIOError(f"{p}: expected mono or stereo, got {channels} channels")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise NotAWavError(f"{p}: not a PCM WAV file ({exc})") from exc
    data = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    if channels == 2:
        data = data.reshape(-1, 2).mean(axis=1)
    return AudioClip(samples=data, sample_rate=rate)


def save_wav(clip: AudioClip, path: str | Path) -> None:
    """Write PCM16 mono WAV (values clipped to the int16 range)."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited (polyphase) resampling; identity when rates match."""
    if target_rate <= 0:
        raise ValidationError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return AudioClip(samples=clip.samples.copy(), sample_rate=clip.sample_rate)
    g = np.gcd(clip.sample_rate, target_rate)
    out = resample_poly(clip.samples.astype(np.float64),
                        target_rate // g, clip.sample_rate // g)
    return AudioClip(samples=out.astype(np.float32), sample_rate=target_rate)


def _hann(win: int) -> torch.Tensor:
    return torch.hann_window(win, periodic=True, dtype=torch.float64)


def stft_magnitude(x: torch.Tensor, fft_size: int, hop: int, win: int,
                   mag_eps: float = 0.0) -> torch.Tensor:
    """Centered magnitude STFT, frames x bins. Works for 1-D (T,) or
    batched (B, T) input; differentiable when ``mag_eps`` > 0 guards the
    sqrt at zero magnitude."""
    if x.shape[-1] < win:
        raise ClipTooShortError(
            f"clip of {x.shape[-1]} samples shorter than one window ({win})")
    window = _hann(win).to(x.dtype)
    spec = torch.stft(x, n_fft=fft_size, hop_length=hop, win_length=win,
                      window=window, center=True, pad_mode="reflect",
                      return_complex=True)
    if mag_eps > 0:
        mag = torch.sqrt(spec.real ** 2 + spec.imag ** 2 + mag_eps)
    else:
        mag = spec.abs()
    return mag.transpose(-1, -2)


def linear_spectrogram(clip: AudioClip, fft_size: int, hop: int,
                       win: int) -> LinearSpectrogram:
    """Magnitude STFT of a clip; frame count = len // hop + 1."""
    if not (hop <= win <= fft_size):
        raise ValidationError("require hop <= win <= fft_size")
    x = torch.from_numpy(np.ascontiguousarray(clip.samples))
    mag = stft_magnitude(x, fft_size, hop, win)
    return LinearSpectrogram(values=mag.numpy().astype(np.float32), hop=hop, win=win)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_bins: int, mel_bins: int, sample_rate: int,
                   fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filters (HTK scale), shape (bins, mel_bins)."""
    if mel_bins < 1:
        raise ValidationError("mel_bins must be >= 1")
    if not (0 <= fmin < fmax <= sample_rate / 2):
        raise ValidationError("require 0 <= fmin < fmax <= rate/2")
    fft_size = 2 * (n_bins - 1)
    freqs = np.arange(n_bins, dtype=np.float64) * sample_rate / fft_size
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), mel_bins + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_bins, mel_bins), dtype=np.float64)
    for m in range(mel_bins):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / (ctr - lo)
        down = (hi - freqs) / (hi - ctr)
        fb[:, m] = np.maximum(0.0, np.minimum(up, down))
    return fb.astype(np.float32)


def mel_from_linear(spec: LinearSpectrogram, mel_bins: int, sample_rate: int,
                    fmin: float, fmax: float) -> MelSpectrogram:
    """Project magnitudes onto mel filters, then log(x + 1e-5)."""
    fb = mel_filterbank(spec.bins, mel_bins, sample_rate, fmin, fmax)
    mel = np.log(spec.values @ fb + MEL_LOG_EPS)
    return MelSpectrogram(values=mel.astype(np.float32))


def mel_of_clip(clip: AudioClip, cfg) -> MelSpectrogram:
    """Convenience: clip -> linear spectrogram -> mel, per config."""
    spec = linear_spectrogram(clip, cfg.fft_size, cfg.hop, cfg.win)
    return mel_from_linear(spec, cfg.mel_bins, cfg.sample_rate,
                           cfg.mel_fmin, cfg.mel_fmax)


class TorchMel:
    """Differentiable mel front end for the reconstruction loss path."""

    def __init__(self, cfg):
        self.fft_size = cfg.fft_size
        self.hop = cfg.hop
        self.win = cfg.win
        fb = mel_filterbank(cfg.fft_size // 2 + 1, cfg.mel_bins,
                            cfg.sample_rate, cfg.mel_fmin, cfg.mel_fmax)
        self.fb = torch.from_numpy(fb)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        # mag_eps only guards the sqrt gradient at exactly-zero bins; it is
        # small enough to leave the mel floor untouched
        mag = stft_magnitude(x, self.fft_size, self.hop, self.win, mag_eps=1e-24)
        return torch.log(mag @ self.fb.to(x.dtype) + MEL_LOG_EPS)
