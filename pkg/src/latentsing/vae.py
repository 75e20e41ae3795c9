"""Latent autoencoder: posterior encoder, NSF decoder, pretraining loop.

The posterior encoder maps (linear spectrogram, speaker embedding) to a
per-frame Gaussian over the latent space; the decoder renders a waveform
from (latent, F0, speaker) with a harmonic/noise source-filter scheme.
Desk-scale pretraining optimizes mel-L1 reconstruction plus a KL pull
toward N(0, I), which is exactly the prior the latent sampler starts
from. The content and speaker encoders train alongside on auxiliary
objectives and ship in the same checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audio import AudioClip, TorchMel, load_wav, resample, stft_magnitude
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conditioning import AdditiveMarginSoftmax, ContentEncoder, SpeakerEncoder
from .config import Config, derive_seed
from .errors import DivergenceError, ValidationError
from .pitch import extract_f0
from .synthdata import DatasetManifest

LOGVAR_CLAMP = 10.0
SPK_LOSS_WEIGHT = 0.5
CONTENT_AUX_WEIGHT = 1.0
NSF_HARMONICS = 8
NSF_HARMONIC_AMP = 0.1
NSF_VOICED_NOISE_STD = 0.003


@dataclass
class PosteriorStats:
    mu: torch.Tensor
    logvar: torch.Tensor


class GatedResBlock(nn.Module):
    """Non-causal WaveNet-style residual block with gated activation and
    a 1x1 speaker projection added before the gate. The last block of a
    stack only feeds the skip path."""

    def __init__(self, channels: int, d_spk: int, dilation: int,
                 last: bool = False):
        super().__init__()
        pad = dilation
        self.conv = nn.Conv1d(channels, 2 * channels, 3, padding=pad,
                              dilation=dilation)
        self.spk = nn.Linear(d_spk, 2 * channels)
        self.res = None if last else nn.Conv1d(channels, channels, 1)
        self.skip = nn.Conv1d(channels, channels, 1)

    def forward(self, x: torch.Tensor, e: torch.Tensor):
        h = self.conv(x) + self.spk(e).unsqueeze(-1)
        a, b = h.chunk(2, dim=1)
        acts = torch.tanh(a) * torch.sigmoid(b)
        out = x if self.res is None else x + self.res(acts)
        return out, self.skip(acts)


class PosteriorEncoder(nn.Module):
    """Linear spectrogram + speaker embedding -> per-frame (mu, logvar)."""

    def __init__(self, spec_bins: int, channels: int, n_blocks: int,
                 d_spk: int, d_z: int):
        super().__init__()
        self.pre = nn.Conv1d(spec_bins, channels, 1)
        self.blocks = nn.ModuleList([
            GatedResBlock(channels, d_spk, dilation=2 ** (i % 4),
                          last=(i == n_blocks - 1))
            for i in range(n_blocks)
        ])
        self.proj = nn.Conv1d(channels, 2 * d_z, 1)

    def forward(self, spec: torch.Tensor, e: torch.Tensor):
        """spec: (B, frames, bins); e: (B, d_spk)."""
        h = self.pre(spec.transpose(-1, -2))
        skip_sum = torch.zeros_like(h)
        for block in self.blocks:
            h, skip = block(h, e)
            skip_sum = skip_sum + skip
        stats = self.proj(skip_sum).transpose(-1, -2)
        mu, logvar = stats.chunk(2, dim=-1)
        return PosteriorStats(mu=mu,
                              logvar=logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))


def posterior_encode(encoder: PosteriorEncoder, spec: torch.Tensor,
                     e: torch.Tensor, deterministic: bool = True,
                     generator: torch.Generator | None = None):
    """Reparameterized z = mu + exp(logvar/2) * eps, or z = mu in
    deterministic mode (the canonical LDM-training target)."""
    batched = spec.dim() == 3
    if not batched:
        spec, e = spec.unsqueeze(0), e.unsqueeze(0)
    stats = encoder(spec, e)
    if deterministic:
        z = stats.mu
    else:
        eps = torch.randn(stats.mu.shape, generator=generator,
                          dtype=stats.mu.dtype)
        z = stats.mu + torch.exp(0.5 * stats.logvar) * eps
    if not batched:
        stats = PosteriorStats(stats.mu.squeeze(0), stats.logvar.squeeze(0))
        z = z.squeeze(0)
    return stats, z


def upsample_rates(hop: int) -> list[int]:
    rates = []
    h = hop
    while h > 1:
        for r in (8, 4, 2):
            if h % r == 0:
                rates.append(r)
                h //= r
                break
        else:
            raise ValidationError(f"hop {hop} must factor into 8/4/2 stages")
    return rates


def harmonic_noise_source(f0_frames: torch.Tensor, hop: int, sample_rate: int,
                          generator: torch.Generator | None = None,
                          dtype=torch.float32) -> torch.Tensor:
    """Sample-rate excitation: sum of harmonic sines where voiced,
    Gaussian noise elsewhere. f0_frames: (B, frames) -> (B, frames*hop)."""
    f0 = f0_frames.to(torch.float64).repeat_interleave(hop, dim=-1)
    voiced = (f0 > 0).to(torch.float64)
    phase = 2.0 * math.pi * torch.cumsum(f0, dim=-1) / sample_rate
    k = torch.arange(1, NSF_HARMONICS + 1, dtype=torch.float64).view(1, -1, 1)
    waves = torch.sin(k * phase.unsqueeze(1))
    audible = (k * f0.unsqueeze(1) < 0.45 * sample_rate).to(torch.float64)
    harm = NSF_HARMONIC_AMP * (waves * audible).sum(dim=1) * voiced
    noise_std = voiced * NSF_VOICED_NOISE_STD + (1 - voiced) * (NSF_HARMONIC_AMP / 3.0)
    noise = torch.randn(f0.shape, generator=generator, dtype=torch.float64)
    return (harm + noise_std * noise).to(dtype)


class SourceResBlock(nn.Module):
    def __init__(self, channels: int, dilation: int):
        super().__init__()
        pad = dilation
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=pad, dilation=dilation)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1)
        self.src = nn.Conv1d(1, channels, 1)

    def forward(self, x: torch.Tensor, src: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.leaky_relu(x, 0.1)) + self.src(src)
        h = self.conv2(torch.nn.functional.leaky_relu(h, 0.1))
        return x + h


class NsfDecoder(nn.Module):
    """(latent, F0, speaker) -> waveform of length frames * hop.

    The F0-driven excitation is injected into every upsampling stage at
    the stage's rate; the transposed convolutions expand the latent by
    hop x in total. Output projection starts at zero so an untrained
    decoder emits silence.
    """

    def __init__(self, d_z: int, d_spk: int, channels: int, hop: int,
                 sample_rate: int):
        super().__init__()
        self.hop = hop
        self.sample_rate = sample_rate
        rates = upsample_rates(hop)
        chans = [channels]
        for _ in rates:
            chans.append(max(4, chans[-1] // 2))
        self.pre = nn.Conv1d(d_z, channels, 3, padding=1)
        self.spk = nn.Linear(d_spk, channels)
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.stage_factors = []
        produced = 1
        for i, r in enumerate(rates):
            self.ups.append(nn.ConvTranspose1d(chans[i], chans[i + 1], 2 * r,
                                               stride=r, padding=r // 2))
            self.blocks.append(nn.ModuleList([
                SourceResBlock(chans[i + 1], dilation=1),
                SourceResBlock(chans[i + 1], dilation=3),
            ]))
            produced *= r
            self.stage_factors.append(hop // produced)
        self.post = nn.Conv1d(chans[-1], 1, 7, padding=3)
        nn.init.zeros_(self.post.weight)
        nn.init.zeros_(self.post.bias)

    def forward(self, z: torch.Tensor, f0: torch.Tensor, e: torch.Tensor,
                generator: torch.Generator | None = None) -> torch.Tensor:
        """z: (B, frames, d_z); f0: (B, frames); e: (B, d_spk) ->
        (B, frames*hop)."""
        if f0.shape[-1] != z.shape[-2]:
            raise ValidationError("f0 frame count must match latent frames")
        source = harmonic_noise_source(f0, self.hop, self.sample_rate,
                                       generator=generator, dtype=z.dtype)
        src = source.unsqueeze(1)
        h = self.pre(z.transpose(-1, -2)) + self.spk(e).unsqueeze(-1)
        for up, blocks, factor in zip(self.ups, self.blocks, self.stage_factors):
            h = up(torch.nn.functional.leaky_relu(h, 0.1))
            stage_src = (src if factor == 1
                         else torch.nn.functional.avg_pool1d(src, factor, factor))
            for block in blocks:
                h = block(h, stage_src)
        return torch.tanh(self.post(h)).squeeze(1)


def decode(decoder: NsfDecoder, z: torch.Tensor, f0_hz: np.ndarray,
           e: torch.Tensor,
           generator: torch.Generator | None = None) -> AudioClip:
    """Single-clip decode to an AudioClip at the decoder's sample rate."""
    f0 = torch.from_numpy(np.asarray(f0_hz, dtype=np.float32))
    with torch.no_grad():
        wav = decoder(z.unsqueeze(0), f0.unsqueeze(0), e.unsqueeze(0),
                      generator=generator)
    return AudioClip(samples=wav.squeeze(0).numpy(),
                     sample_rate=decoder.sample_rate)


class VaeSystem(nn.Module):
    """Everything produced by VAE-stage pretraining: posterior encoder,
    NSF decoder, content/speaker encoders, plus the training-only heads."""

    def __init__(self, cfg: Config, n_train_singers: int = 0):
        super().__init__()
        self.cfg = cfg
        spec_bins = cfg.fft_size // 2 + 1
        self.encoder = PosteriorEncoder(spec_bins, cfg.vae_channels,
                                        cfg.vae_blocks, cfg.d_spk, cfg.d_z)
        self.decoder = NsfDecoder(cfg.d_z, cfg.d_spk, cfg.dec_channels,
                                  cfg.hop, cfg.sample_rate)
        self.content = ContentEncoder(cfg.mel_bins, cfg.d_content)
        self.speaker = SpeakerEncoder(cfg.mel_bins, cfg.spk_channels, cfg.d_spk)
        self.amsoftmax = (AdditiveMarginSoftmax(cfg.d_spk, n_train_singers)
                          if n_train_singers else None)
        self.mel = TorchMel(cfg)

    def freeze(self) -> "VaeSystem":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-element mean of KL(N(mu, exp(logvar)) || N(0, I))."""
    return 0.5 * (mu ** 2 + torch.exp(logvar) - 1.0 - logvar).mean()


def vae_loss(system: VaeSystem, batch: dict, beta_kl: float,
             generator: torch.Generator | None = None,
             deterministic: bool = False):
    """Reconstruction (mel L1) + KL toward N(0, I).

    batch: spec (B, F, bins), f0 (B, F), e (B, d_spk),
    mel_target (B, F, mel_bins). Returns (total, recon, kl).
    """
    spec, f0, e = batch["spec"], batch["f0"], batch["e"]
    mel_target = batch["mel_target"]
    frames = spec.shape[-2]
    stats, z = posterior_encode(system.encoder, spec, e,
                                deterministic=deterministic,
                                generator=generator)
    wav_hat = system.decoder(z, f0, e, generator=generator)
    mel_hat = system.mel(wav_hat)[..., :frames, :]
    recon = (mel_hat - mel_target).abs().mean()
    kl = gaussian_kl(stats.mu, stats.logvar)
    total = recon + beta_kl * kl
    if not torch.isfinite(total):
        raise DivergenceError(
            f"non-finite VAE loss (recon={recon.detach()}, kl={kl.detach()})")
    return total, recon, kl


@dataclass
class ClipRecord:
    """Cached per-clip features shared by the training stages."""

    wav: torch.Tensor          # (samples,)
    mel_full: torch.Tensor     # (frames, mel_bins)
    f0_hz: np.ndarray          # (frames,)
    singer_id: str
    label: int


def load_training_clips(manifest: DatasetManifest, cfg: Config,
                        split: str = "train") -> list[ClipRecord]:
    entries = manifest.by_split(split)
    if not entries:
        raise ValidationError(f"manifest has no '{split}' entries")
    singers = sorted({e.singer_id for e in entries})
    label_of = {s: i for i, s in enumerate(singers)}
    mel = TorchMel(cfg)
    records = []
    for entry in entries:
        clip = resample(load_wav(manifest.entry_path(entry)), cfg.sample_rate)
        wav = torch.from_numpy(clip.samples)
        mel_full = mel(wav)
        f0 = extract_f0(clip, cfg.f0_min, cfg.f0_max, hop=cfg.hop,
                        threshold=cfg.yin_threshold)
        records.append(ClipRecord(wav=wav, mel_full=mel_full, f0_hz=f0.hz,
                                  singer_id=entry.singer_id,
                                  label=label_of[entry.singer_id]))
    return records


def _crop_batch(records: list[ClipRecord], idx: torch.Tensor,
                crop_frames: int, cfg: Config, gen: torch.Generator,
                mel_op: TorchMel):
    """Aligned (wav segment, spectrogram, f0, mel target) crops."""
    frames = crop_frames + 1
    wavs, f0s, labels = [], [], []
    for j in idx.tolist():
        rec = records[j]
        max_start = len(rec.f0_hz) - frames
        if max_start < 0:
            raise ValidationError("clip shorter than one training crop")
        start = int(torch.randint(0, max_start + 1, (1,), generator=gen))
        s0 = start * cfg.hop
        wavs.append(rec.wav[s0:s0 + crop_frames * cfg.hop])
        f0s.append(torch.from_numpy(
            rec.f0_hz[start:start + frames].astype(np.float32)))
        labels.append(rec.label)
    wav = torch.stack(wavs)
    f0 = torch.stack(f0s)
    spec = stft_magnitude(wav, cfg.fft_size, cfg.hop, cfg.win)
    mel_target = mel_op(wav)
    return wav, spec, f0, mel_target, torch.tensor(labels, dtype=torch.int64)


def _adam_state_tensors(opt: torch.optim.Adam, names: list[str]) -> dict:
    tensors = {}
    params = [p for group in opt.param_groups for p in group["params"]]
    for name, p in zip(names, params):
        state = opt.state.get(p)
        if not state:
            continue
        tensors[f"opt.{name}.exp_avg"] = state["exp_avg"].numpy()
        tensors[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy()
        tensors[f"opt.{name}.step"] = np.asarray(
            [float(state["step"])], dtype=np.float64)
    return tensors


def _load_adam_state(opt: torch.optim.Adam, names: list[str],
                     tensors: dict) -> None:
    params = [p for group in opt.param_groups for p in group["params"]]
    for name, p in zip(names, params):
        key = f"opt.{name}.exp_avg"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[f"opt.{name}.step"][0])),
            "exp_avg": torch.from_numpy(
                tensors[f"opt.{name}.exp_avg"].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(
                tensors[f"opt.{name}.exp_avg_sq"].copy()).to(p.dtype),
        }


def save_vae_checkpoint(path: str | Path, system: VaeSystem, cfg: Config,
                        step: int, history: list[dict],
                        opt: torch.optim.Adam | None = None) -> None:
    tensors = {k: v.detach().numpy() for k, v in system.state_dict().items()}
    if opt is not None:
        names = [n for n, _ in system.named_parameters()]
        tensors.update(_adam_state_tensors(opt, names))
    save_checkpoint(path, "vae", cfg, tensors,
                    extras={"step": step, "history": history})


def load_vae_system(ckpt: Checkpoint) -> VaeSystem:
    if ckpt.kind != "vae":
        raise ValidationError(f"expected a VAE checkpoint, got {ckpt.kind!r}")
    n_classes = 0
    if "amsoftmax.weight" in ckpt.tensors:
        n_classes = ckpt.tensors["amsoftmax.weight"].shape[0]
    system = VaeSystem(ckpt.config, n_train_singers=n_classes)
    state = {k: torch.from_numpy(v.copy())
             for k, v in ckpt.tensors.items() if not k.startswith("opt.")}
    system.load_state_dict(state)
    return system.eval()


def train_vae(manifest: DatasetManifest, cfg: Config,
              out_dir: str | Path | None = None, seed: int | None = None,
              resume: bool = True):
    """Joint VAE/content/speaker pretraining. Deterministic given
    (config, seed): init and every step's randomness derive from named
    sub-seeds, so an interrupted run resumed from its latest periodic
    checkpoint matches the uninterrupted run.

    Returns (system, history); writes vae_step*.ckpt files when
    ``out_dir`` is given.
    """
    seed = cfg.seed if seed is None else seed
    records = load_training_clips(manifest, cfg, "train")
    n_singers = len({r.singer_id for r in records})

    torch.manual_seed(derive_seed(seed, "vae-init"))
    system = VaeSystem(cfg, n_train_singers=n_singers).train()
    opt = torch.optim.Adam(system.parameters(), lr=cfg.vae_lr)
    names = [n for n, _ in system.named_parameters()]

    start_step, history = 0, []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            latest = _latest_ckpt(out, "vae_step")
            if latest is not None:
                ckpt = load_checkpoint(latest, expected_hash=cfg.config_hash())
                system = load_vae_system(ckpt).train()
                opt = torch.optim.Adam(system.parameters(), lr=cfg.vae_lr)
                _load_adam_state(opt, names, ckpt.tensors)
                start_step = int(ckpt.extras["step"])
                history = list(ckpt.extras["history"])

    min_frames = min(len(r.f0_hz) for r in records)
    crop = min(cfg.crop_frames, min_frames - 1)
    mel_op = TorchMel(cfg)
    for step in range(start_step + 1, cfg.vae_steps + 1):
        gen = torch.Generator().manual_seed(derive_seed(seed, f"vae-step:{step}"))
        idx = torch.randint(0, len(records), (cfg.batch_size,), generator=gen)
        _, spec, f0, mel_target, labels = _crop_batch(records, idx, crop, cfg,
                                                      gen, mel_op)

        e_grad = torch.stack([system.speaker(records[j].mel_full)
                              for j in idx.tolist()])
        spk_loss = system.amsoftmax(e_grad, labels)
        batch = {"spec": spec, "f0": f0, "e": e_grad.detach(),
                 "mel_target": mel_target}
        total, recon, kl = vae_loss(system, batch, cfg.beta_kl, generator=gen)
        x = system.content(mel_target)
        aux = (system.content.reconstruct_mel(x) - mel_target).abs().mean()

        loss = total + SPK_LOSS_WEIGHT * spk_loss + CONTENT_AUX_WEIGHT * aux
        if not torch.isfinite(loss):
            raise DivergenceError(f"VAE training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(system.parameters(), cfg.grad_clip)
        opt.step()

        if step % cfg.log_interval == 0 or step == cfg.vae_steps:
            history.append({"step": step, "total": float(total.detach()),
                            "recon": float(recon.detach()),
                            "kl": float(kl.detach()),
                            "spk": float(spk_loss.detach()),
                            "aux": float(aux.detach())})
        if out is not None and (step % cfg.ckpt_interval == 0
                                or step == cfg.vae_steps):
            save_vae_checkpoint(out / f"vae_step{step:06d}.ckpt", system, cfg,
                                step, history, opt)
    return system.eval(), history


def _latest_ckpt(out: Path, prefix: str) -> Path | None:
    paths = sorted(out.glob(f"{prefix}*.ckpt"))
    return paths[-1] if paths else None
