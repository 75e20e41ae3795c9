"""End-to-end any-to-any conversion: source audio + target references ->
converted waveform.

Stages: resample, source content/F0 analysis, target speaker embedding
and voiced-mean pooling, mean-ratio F0 shifting, latent sampling under
singer guidance, and NSF decoding. Deterministic given the request seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import AudioClip, mel_of_clip, resample, stft_magnitude
from .checkpoint import Checkpoint
from .conditioning import (ConditionSet, ContentFeatures, SpeakerEmbedding,
                           content_features, speaker_embed)
from .config import Config, derive_seed
from .diffusion import load_denoiser, sample
from .errors import CompatibilityError, ValidationError
from .pitch import (F0Contour, extract_f0, quantize_log_f0, shift_f0,
                    voiced_mean)
from .schedule import linear_schedule
from .vae import decode, load_vae_system


@dataclass
class ConversionRequest:
    source: AudioClip
    references: list[AudioClip]
    w: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not self.references:
            raise ValidationError("conversion requires at least one reference clip")
        if self.w < 0:
            raise ValidationError("guidance weight must be >= 0")


@dataclass
class ConversionResult:
    audio: AudioClip
    shifted_f0: F0Contour
    target_mean_f0: float
    timings: dict[str, float] = field(default_factory=dict)


def _pooled_voiced_mean(contours: list[F0Contour]) -> float:
    """Duration-weighted pooling: the mean over all voiced frames of all
    reference contours."""
    voiced = np.concatenate([c.hz[c.voiced] for c in contours])
    if voiced.size == 0:
        raise ValidationError("reference clips contain no voiced frames")
    return float(voiced.mean())


def convert(req: ConversionRequest, vae_ckpt: Checkpoint,
            ldm_ckpt: Checkpoint) -> ConversionResult:
    if vae_ckpt.kind != "vae" or ldm_ckpt.kind != "ldm":
        raise CompatibilityError("convert needs one VAE and one LDM checkpoint")
    if vae_ckpt.config_hash != ldm_ckpt.config_hash:
        raise CompatibilityError(
            "VAE and LDM checkpoints were trained under different configs")
    system = load_vae_system(vae_ckpt)
    denoiser = load_denoiser(ldm_ckpt)
    return convert_prepared(req, system, denoiser,
                            float(ldm_ckpt.extras["latent_scale"]),
                            vae_ckpt.config)


def convert_prepared(req: ConversionRequest, system, denoiser,
                     latent_scale: float, cfg: Config) -> ConversionResult:
    """Conversion against already-loaded models (for batch evaluation)."""
    sched = linear_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)

    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    source = resample(req.source, cfg.sample_rate)
    refs = [resample(r, cfg.sample_rate) for r in req.references]
    timings["resample"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    f0_src = extract_f0(source, cfg.f0_min, cfg.f0_max, hop=cfg.hop,
                        threshold=cfg.yin_threshold)
    mel_src = mel_of_clip(source, cfg)
    x_src = content_features(mel_src.values, system.content)
    timings["analysis"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    e_tar = speaker_embed(refs, system.speaker, cfg)
    ref_contours = [extract_f0(r, cfg.f0_min, cfg.f0_max, hop=cfg.hop,
                               threshold=cfg.yin_threshold) for r in refs]
    mean_tar = _pooled_voiced_mean(ref_contours)
    timings["target"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    f0 = shift_f0(f0_src, mean_tar)
    bins = torch.from_numpy(
        quantize_log_f0(f0, cfg.f0_quant_lo, cfg.f0_quant_hi).idx)
    cond = ConditionSet(x=x_src, f0_bins=bins, e=e_tar)
    gen = torch.Generator().manual_seed(derive_seed(req.seed, "sampling"))
    z = sample(denoiser, cond, req.w, sched, gen, d_z=cfg.d_z)
    timings["diffusion"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    audio = decode(system.decoder, z * latent_scale, f0.hz, e_tar.values,
                   generator=gen)
    timings["decode"] = time.perf_counter() - t0
    return ConversionResult(audio=audio, shifted_f0=f0,
                            target_mean_f0=mean_tar, timings=timings)
