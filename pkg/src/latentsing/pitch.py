"""F0 extraction and manipulation.

The extractor is a YIN-style pitch tracker (difference function with
cumulative-mean normalization, absolute threshold, parabolic
interpolation). Frames are centered on multiples of the spectrogram hop
so F0 contours align 1:1 with spectrogram frames. Externally computed
contours can be injected through a JSON sidecar file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import next_fast_len, irfft, rfft

from .audio import AudioClip
from .errors import ClipTooShortError, UnvoicedContourError, ValidationError

YIN_THRESHOLD = 0.15
N_F0_BINS = 256


@dataclass
class F0Contour:
    """Per-frame F0 in Hz; 0 marks unvoiced frames."""

    hz: np.ndarray
    frame_hop: int

    def __post_init__(self):
        self.hz = np.asarray(self.hz, dtype=np.float64)
        if self.hz.ndim != 1:
            raise ValidationError("F0 contour must be 1-D")
        if not np.all(np.isfinite(self.hz)) or np.any(self.hz < 0):
            raise ValidationError("F0 values must be finite and >= 0")

    @property
    def voiced(self) -> np.ndarray:
        return self.hz > 0

    def save(self, path: str | Path) -> None:
        payload = {"frame_hop": self.frame_hop, "hz": [float(v) for v in self.hz]}
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "F0Contour":
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"F0 sidecar not found: {p}")
        data = json.loads(p.read_text())
        try:
            return cls(hz=np.asarray(data["hz"], dtype=np.float64),
                       frame_hop=int(data["frame_hop"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{p}: bad F0 sidecar") from exc


@dataclass
class F0Bins:
    """Quantized log-F0 indices in [0, 256]; bin 0 is unvoiced/null."""

    idx: np.ndarray

    def __post_init__(self):
        self.idx = np.asarray(self.idx, dtype=np.int64)
        if np.any((self.idx < 0) | (self.idx > N_F0_BINS)):
            raise ValidationError("F0 bin indices must lie in [0, 256]")


def _yin_frames(x: np.ndarray, span: int, hop: int) -> np.ndarray:
    # zero padding (not reflect): mirrored edges fake periodicity dips
    n_frames = len(x) // hop + 1
    half = span // 2
    padded = np.pad(x, (half, half + span), mode="constant")
    idx = np.arange(span)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def extract_f0(clip: AudioClip, f_min: float, f_max: float, hop: int = 256,
               threshold: float = YIN_THRESHOLD) -> F0Contour:
    """YIN pitch tracking; frame count matches the centered STFT
    (len // hop + 1). Frames with no normalized-difference dip below
    ``threshold`` are marked unvoiced."""
    sr = clip.sample_rate
    if not (0 < f_min < f_max <= sr / 2):
        raise ValidationError("require 0 < f_min < f_max <= rate/2")
    tau_max = int(np.ceil(sr / f_min))
    tau_min = max(2, int(sr / f_max))
    w = tau_max  # integration window
    span = w + tau_max
    x = clip.samples.astype(np.float64)
    if len(x) < span // 2 + 1:
        raise ClipTooShortError(
            f"clip of {len(x)} samples too short for F0 analysis span {span}")

    frames = _yin_frames(x, span, hop)
    n_frames = frames.shape[0]

    # d(tau) = e0 + p(tau) - 2*c(tau), vectorized across frames
    sq = frames ** 2
    csum = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(sq, axis=1)], axis=1)
    taus = np.arange(tau_max)
    p = csum[:, taus + w] - csum[:, taus]
    e0 = p[:, :1]
    nfft = next_fast_len(span)
    spec_full = rfft(frames, nfft, axis=1)
    spec_head = rfft(frames[:, :w], nfft, axis=1)
    corr = irfft(np.conj(spec_head) * spec_full, nfft, axis=1)[:, :tau_max]
    d = np.maximum(e0 + p - 2.0 * corr, 0.0)

    # cumulative-mean normalization; silent frames normalize to 1
    cum = np.cumsum(d[:, 1:], axis=1)
    dn = np.ones_like(d)
    np.divide(d[:, 1:] * taus[1:], cum, out=dn[:, 1:], where=cum > 0)

    hz = np.zeros(n_frames, dtype=np.float64)
    below = dn[:, tau_min:tau_max] < threshold
    has_dip = below.any(axis=1)
    first = np.argmax(below, axis=1) + tau_min
    for i in np.nonzero(has_dip)[0]:
        tau = int(first[i])
        while tau + 1 < tau_max and dn[i, tau + 1] < dn[i, tau]:
            tau += 1
        tau_f = float(tau)
        if 0 < tau < tau_max - 1:
            a, b, c = dn[i, tau - 1], dn[i, tau], dn[i, tau + 1]
            denom = a - 2 * b + c
            if denom > 0:
                tau_f += 0.5 * (a - c) / denom
        hz[i] = np.clip(sr / tau_f, f_min, f_max)
    return F0Contour(hz=hz, frame_hop=hop)


def voiced_mean(f0: F0Contour) -> float:
    """Arithmetic mean over voiced frames only."""
    voiced = f0.hz[f0.voiced]
    if voiced.size == 0:
        raise UnvoicedContourError("contour has no voiced frames")
    return float(voiced.mean())


def shift_f0(f0_src: F0Contour, mean_tar: float) -> F0Contour:
    """Multiply every voiced frame by mean_tar / voiced_mean(src), so the
    shifted contour's voiced mean equals ``mean_tar``."""
    if mean_tar <= 0:
        raise ValidationError("mean_tar must be positive")
    ratio = mean_tar / voiced_mean(f0_src)
    return F0Contour(hz=f0_src.hz * ratio, frame_hop=f0_src.frame_hop)


def quantize_log_f0(f0: F0Contour, f_lo: float, f_hi: float) -> F0Bins:
    """Uniform partition of [log f_lo, log f_hi] into 256 bins (1..256,
    clamped at the ends); unvoiced frames map to the reserved bin 0."""
    if not (0 < f_lo < f_hi):
        raise ValidationError("require 0 < f_lo < f_hi")
    idx = np.zeros(len(f0.hz), dtype=np.int64)
    voiced = f0.voiced
    if voiced.any():
        u = (np.log(f0.hz[voiced]) - np.log(f_lo)) / (np.log(f_hi) - np.log(f_lo))
        idx[voiced] = np.clip(1 + np.floor(u * N_F0_BINS).astype(np.int64),
                              1, N_F0_BINS)
    return F0Bins(idx=idx)


def fpc(f0_a: F0Contour, f0_b: F0Contour) -> float:
    """Pearson correlation of Hz values over frames voiced in both."""
    if len(f0_a.hz) != len(f0_b.hz):
        raise ValidationError("FPC requires equal frame counts")
    joint = f0_a.voiced & f0_b.voiced
    if joint.sum() < 2:
        raise ValidationError("FPC requires at least 2 jointly-voiced frames")
    a = f0_a.hz[joint]
    b = f0_b.hz[joint]
    a = a - a.mean()
    b = b - b.mean()
    sa = float(a @ a)
    sb = float(b @ b)
    if sa == 0.0 or sb == 0.0:
        raise ValidationError("FPC undefined under zero variance")
    return float((a @ b) / np.sqrt(sa * sb))
