"""Condition encoders for the latent diffusion model.

Content features come from a small stride-1 convolutional stand-in
(frame-aligned, content-bearing); speaker embeddings from a stats-pooling
encoder trained with additive-margin softmax over training singers. Both
are deliberately lightweight replacements for the large pretrained
front ends used at full scale, and both can be bypassed with sidecar
files. SCLN and the melody lookup feed the denoiser's conditioning
stream; the null condition (guidance) is a learned speaker vector plus
melody bin 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .audio import AudioClip, mel_of_clip
from .errors import ClipTooShortError, ValidationError

LAYER_NORM_EPS = 1e-5


@dataclass
class ContentFeatures:
    """Frame-aligned content features, frames x d_content."""

    values: torch.Tensor

    @property
    def frames(self) -> int:
        return self.values.shape[-2]


@dataclass
class SpeakerEmbedding:
    """Unit-norm speaker vector; ``is_null`` marks the guidance null slot
    (materialized as a learned vector inside the denoiser)."""

    values: torch.Tensor
    is_null: bool = False


@dataclass
class ConditionSet:
    """Denoiser conditioning bundle. ``dropped`` means e and the F0 bins
    were jointly nulled (the unconditional guidance branch)."""

    x: ContentFeatures
    f0_bins: torch.Tensor
    e: SpeakerEmbedding
    dropped: bool = False

    def __post_init__(self):
        if self.f0_bins.shape[-1] != self.x.frames:
            raise ValidationError("f0_bins frame count must match content frames")
        if self.dropped:
            if not self.e.is_null:
                raise ValidationError("dropped condition set requires a null speaker")
            if bool((self.f0_bins != 0).any()):
                raise ValidationError("dropped condition set requires all-zero f0 bins")


def null_conditions(x: ContentFeatures) -> ConditionSet:
    """Unconditional branch: keep x, null the speaker and melody."""
    frames = x.frames
    bins = torch.zeros(x.values.shape[:-2] + (frames,), dtype=torch.int64)
    e = SpeakerEmbedding(values=torch.zeros(0), is_null=True)
    return ConditionSet(x=x, f0_bins=bins, e=e, dropped=True)


class ContentEncoder(nn.Module):
    """4 stride-1 conv layers on mel; frame count is preserved. The mel
    head is the auxiliary reconstruction target used only while training
    the stand-in."""

    def __init__(self, mel_bins: int, d_content: int):
        super().__init__()
        h = max(32, d_content // 2)
        self.layers = nn.ModuleList([
            nn.Conv1d(mel_bins, h, 3, padding=1),
            nn.Conv1d(h, h, 3, padding=1),
            nn.Conv1d(h, h, 3, padding=1),
            nn.Conv1d(h, d_content, 3, padding=1),
        ])
        self.mel_head = nn.Conv1d(d_content, mel_bins, 1)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """(..., frames, mel_bins) -> (..., frames, d_content)."""
        h = mel.transpose(-1, -2)
        if h.dim() == 2:
            h = h.unsqueeze(0)
            squeeze = True
        else:
            squeeze = False
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = torch.nn.functional.leaky_relu(h, 0.1)
        h = h.transpose(-1, -2)
        return h.squeeze(0) if squeeze else h

    def reconstruct_mel(self, features: torch.Tensor) -> torch.Tensor:
        h = features.transpose(-1, -2)
        if h.dim() == 2:
            return self.mel_head(h.unsqueeze(0)).squeeze(0).transpose(-1, -2)
        return self.mel_head(h).transpose(-1, -2)


def content_features(mel_values: np.ndarray | torch.Tensor,
                     encoder: ContentEncoder) -> ContentFeatures:
    if isinstance(mel_values, np.ndarray):
        mel_values = torch.from_numpy(mel_values)
    with torch.no_grad():
        out = encoder(mel_values)
    return ContentFeatures(values=out)


class SpeakerEncoder(nn.Module):
    """mel -> conv stack -> statistics pooling (mean+std) -> linear ->
    unit-norm embedding."""

    def __init__(self, mel_bins: int, channels: int, d_spk: int):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv1d(mel_bins, channels, 5, padding=2),
            nn.Conv1d(channels, channels, 3, padding=2, dilation=2),
            nn.Conv1d(channels, channels, 3, padding=3, dilation=3),
        ])
        self.proj = nn.Linear(2 * channels, d_spk)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """(frames, mel_bins) or (B, frames, mel_bins) -> unit vectors."""
        h = mel.transpose(-1, -2)
        if h.dim() == 2:
            h = h.unsqueeze(0)
            squeeze = True
        else:
            squeeze = False
        for conv in self.convs:
            h = torch.nn.functional.leaky_relu(conv(h), 0.1)
        mean = h.mean(dim=-1)
        std = torch.sqrt(h.var(dim=-1, unbiased=False) + LAYER_NORM_EPS)
        e = self.proj(torch.cat([mean, std], dim=-1))
        e = e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return e.squeeze(0) if squeeze else e


class AdditiveMarginSoftmax(nn.Module):
    """Classification head for speaker-encoder training."""

    def __init__(self, d_spk: int, n_classes: int, scale: float = 20.0,
                 margin: float = 0.2):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, d_spk) * 0.1)
        self.scale = scale
        self.margin = margin

    def forward(self, e: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        w = self.weight / self.weight.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        cos = e @ w.t()
        onehot = torch.nn.functional.one_hot(labels, cos.shape[-1]).to(cos.dtype)
        logits = self.scale * (cos - self.margin * onehot)
        return torch.nn.functional.cross_entropy(logits, labels)


def speaker_embed(refs: list[AudioClip], encoder: SpeakerEncoder,
                  cfg) -> SpeakerEmbedding:
    """Mean-pool per-clip embeddings over the references, renormalize."""
    if not refs:
        raise ValidationError("speaker_embed requires at least one reference clip")
    embs = []
    for clip in refs:
        if len(clip.samples) < clip.sample_rate:
            raise ClipTooShortError("reference clips must be at least 1 s long")
        mel = torch.from_numpy(mel_of_clip(clip, cfg).values)
        with torch.no_grad():
            embs.append(encoder(mel))
    e = torch.stack(embs).mean(dim=0)
    e = e / e.norm().clamp_min(1e-12)
    return SpeakerEmbedding(values=e)


class SCLN(nn.Module):
    """Speaker-condition layer normalization: per-frame layer norm of the
    content features followed by scale/shift produced from the speaker
    embedding. Projections initialize to the identity affine."""

    def __init__(self, d_spk: int, d_content: int):
        super().__init__()
        self.to_gamma = nn.Linear(d_spk, d_content)
        self.to_beta = nn.Linear(d_spk, d_content)
        nn.init.zeros_(self.to_gamma.weight)
        nn.init.ones_(self.to_gamma.bias)
        nn.init.zeros_(self.to_beta.weight)
        nn.init.zeros_(self.to_beta.bias)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + LAYER_NORM_EPS)

    def forward(self, x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        """x: (..., frames, d_content); e: (..., d_spk)."""
        if x.shape[-1] != self.to_gamma.bias.shape[0]:
            raise ValidationError("SCLN feature width mismatch")
        gamma = self.to_gamma(e).unsqueeze(-2)
        beta = self.to_beta(e).unsqueeze(-2)
        return self.normalize(x) * gamma + beta


class MelodyEmbedding(nn.Module):
    """Lookup table over the 256 quantized log-F0 bins plus the null row 0."""

    def __init__(self, d_f0: int, n_bins: int = 256):
        super().__init__()
        self.table = nn.Embedding(n_bins + 1, d_f0)

    def forward(self, bins: torch.Tensor) -> torch.Tensor:
        if bool((bins < 0).any()) or bool((bins >= self.table.num_embeddings).any()):
            raise ValidationError("f0 bin index out of range")
        return self.table(bins)
