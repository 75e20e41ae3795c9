"""Configuration loading, validation, hashing, and seed derivation.

The canonical config format is a flat ``key = value`` text file (``#``
comments allowed). Every key has a typed default below; unknown keys are
rejected. The config hash is a digest of the canonical serialization, so
any override changes the hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ValidationError


@dataclass
class Config:
    # audio front end
    sample_rate: int = 32000
    fft_size: int = 1024
    hop: int = 256
    win: int = 1024
    mel_bins: int = 80
    mel_fmin: float = 40.0
    mel_fmax: float = 16000.0

    # pitch extraction and quantization
    f0_min: float = 40.0
    f0_max: float = 1100.0
    f0_quant_lo: float = 40.0
    f0_quant_hi: float = 1100.0
    yin_threshold: float = 0.15

    # model sizes
    d_z: int = 32
    d_spk: int = 192
    d_content: int = 256
    d_f0: int = 64
    vae_channels: int = 64
    vae_blocks: int = 8
    dec_channels: int = 48
    spk_channels: int = 64
    denoiser_channels: int = 64
    denoiser_blocks: int = 12
    step_emb_dim: int = 64

    # noise schedule
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.06

    # guidance
    p_uncond: float = 0.1
    guidance_w: float = 0.3

    # training
    seed: int = 1234
    batch_size: int = 6
    crop_frames: int = 32
    vae_steps: int = 3000
    vae_lr: float = 1e-3
    ldm_steps: int = 4000
    ldm_lr: float = 2e-4
    beta_kl: float = 0.01
    grad_clip: float = 1.0
    log_interval: int = 50
    ckpt_interval: int = 500

    # synthetic dataset
    n_singers: int = 8
    clips_per_singer: int = 8
    n_unseen: int = 3
    clip_seconds: float = 2.0
    test_clips_per_seen: int = 2

    # evaluation
    eval_max_trials: int = 0  # 0 = no limit

    # paths
    out_root: str = "runs"

    def validate(self) -> "Config":
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if not (self.hop <= self.win <= self.fft_size):
            raise ValidationError("require hop <= win <= fft_size")
        if self.mel_bins < 1:
            raise ValidationError("mel_bins must be >= 1")
        if not (0 < self.mel_fmin < self.mel_fmax <= self.sample_rate / 2):
            raise ValidationError("require 0 < mel_fmin < mel_fmax <= rate/2")
        if not (0 < self.f0_min < self.f0_max <= self.sample_rate / 2):
            raise ValidationError("require 0 < f0_min < f0_max <= rate/2")
        if not (0 < self.f0_quant_lo < self.f0_quant_hi):
            raise ValidationError("require 0 < f0_quant_lo < f0_quant_hi")
        if self.diffusion_steps < 1:
            raise ValidationError("diffusion_steps must be >= 1")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ValidationError("require 0 < beta_start <= beta_end < 1")
        if not (0 <= self.p_uncond < 1):
            raise ValidationError("p_uncond must be in [0, 1)")
        if self.guidance_w < 0:
            raise ValidationError("guidance_w must be >= 0")
        if self.n_unseen >= self.n_singers:
            raise ValidationError("n_unseen must be smaller than n_singers")
        if self.test_clips_per_seen >= self.clips_per_singer:
            raise ValidationError("test_clips_per_seen must leave clips for training")
        for name in ("batch_size", "crop_frames", "vae_steps", "ldm_steps",
                     "log_interval", "ckpt_interval", "clips_per_singer"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        return self

    def canonical_text(self) -> str:
        """Serialize as sorted ``key = value`` lines (the hash input)."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.canonical_text())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(field: dataclasses.Field, raw: str):
    raw = raw.strip()
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
        if field.type in ("str", str):
            return raw
    except ValueError as exc:
        raise ValidationError(f"bad value for {field.name!r}: {raw!r}") from exc
    raise ValidationError(f"unsupported config field type for {field.name!r}")


def parse_config_text(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines on top of defaults (or ``base``)."""
    cfg = dataclasses.replace(base) if base is not None else Config()
    known = {f.name: f for f in fields(Config)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValidationError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(known[key], raw))
    return cfg


def load_config(path: str | Path | None = None,
                overrides: dict[str, str] | None = None) -> Config:
    """Load config file (defaults if ``path`` is None), apply overrides,
    validate. Overrides re-enter the canonical text and thus the hash."""
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file not found: {p}")
        cfg = parse_config_text(p.read_text())
    else:
        cfg = Config()
    if overrides:
        lines = "\n".join(f"{k} = {v}" for k, v in overrides.items())
        cfg = parse_config_text(lines, base=cfg)
    return cfg.validate()


def derive_seed(root_seed: int, stream: str) -> int:
    """Derive an independent sub-stream seed from the root seed.

    Streams are named ("data", "vae-init", "ldm-init", "sampling",
    "vae-step:<i>", ...) so each stage is reproducible in isolation.
    """
    digest = hashlib.sha256(f"{root_seed}\x1f{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
