"""Conditional latent denoiser, its training objective, and the sampler.

The denoiser predicts the forward-process noise from (z_t, t) plus a
per-frame conditioning stream built from SCLN-normalized content
features, the melody-bin embedding, and a broadcast speaker projection.
Training drops the speaker embedding and melody jointly with probability
p_uncond; sampling combines conditional and unconditional predictions as
(1+w)*eps_cond - w*eps_uncond before each reverse step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audio import stft_magnitude
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conditioning import SCLN, ConditionSet, MelodyEmbedding, null_conditions
from .config import Config, derive_seed
from .errors import DivergenceError, StageOrderError, ValidationError
from .pitch import F0Contour, quantize_log_f0
from .schedule import NoiseSchedule, linear_schedule, q_sample_batch
from .synthdata import DatasetManifest
from .vae import VaeSystem, load_training_clips, posterior_encode


def step_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of the (1-indexed) diffusion step."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0)
                      * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = t.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb


class DenoiserBlock(nn.Module):
    """Gated residual conv block with step and condition injection."""

    def __init__(self, channels: int, dilation: int):
        super().__init__()
        self.step = nn.Linear(channels, channels)
        self.conv = nn.Conv1d(channels, 2 * channels, 3, padding=dilation,
                              dilation=dilation)
        self.cond = nn.Conv1d(channels, 2 * channels, 1)
        self.out = nn.Conv1d(channels, 2 * channels, 1)

    def forward(self, x, step_emb, cond):
        h = x + self.step(step_emb).unsqueeze(-1)
        h = self.conv(h) + self.cond(cond)
        a, b = h.chunk(2, dim=1)
        acts = torch.tanh(a) * torch.sigmoid(b)
        res, skip = self.out(acts).chunk(2, dim=1)
        return (x + res) / math.sqrt(2.0), skip


class Denoiser(nn.Module):
    """eps_theta(z_t, t, x, f0 bins, e) with a learned null speaker slot."""

    def __init__(self, cfg: Config):
        super().__init__()
        c = cfg.denoiser_channels
        self.T = cfg.diffusion_steps
        self.step_dim = cfg.step_emb_dim
        self.step_mlp = nn.Sequential(
            nn.Linear(cfg.step_emb_dim, c), nn.SiLU(), nn.Linear(c, c))
        self.scln = SCLN(cfg.d_spk, cfg.d_content)
        self.melody = MelodyEmbedding(cfg.d_f0)
        self.null_spk = nn.Parameter(torch.randn(cfg.d_spk) * 0.1)
        self.x_proj = nn.Conv1d(cfg.d_content, c, 1)
        self.f0_proj = nn.Conv1d(cfg.d_f0, c, 1)
        self.e_proj = nn.Linear(cfg.d_spk, c)
        self.z_in = nn.Conv1d(cfg.d_z, c, 1)
        self.blocks = nn.ModuleList([
            DenoiserBlock(c, dilation=2 ** (i % 4))
            for i in range(cfg.denoiser_blocks)
        ])
        self.post = nn.Sequential(
            nn.Conv1d(c, c, 1), nn.ReLU(), nn.Conv1d(c, cfg.d_z, 1))
        nn.init.zeros_(self.post[-1].weight)
        nn.init.zeros_(self.post[-1].bias)

    def conditioning_stream(self, x, bins, e, null_mask):
        """(B, frames, d_content), (B, frames), (B, d_spk), (B,) bool ->
        (B, channels, frames)."""
        if null_mask.any():
            null = self.null_spk.to(e.dtype).expand_as(e)
            e = torch.where(null_mask.unsqueeze(-1), null, e)
        normed = self.scln(x, e)
        cond = self.x_proj(normed.transpose(-1, -2))
        cond = cond + self.f0_proj(self.melody(bins).transpose(-1, -2))
        cond = cond + self.e_proj(e).unsqueeze(-1)
        return cond

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, x: torch.Tensor,
                bins: torch.Tensor, e: torch.Tensor,
                null_mask: torch.Tensor) -> torch.Tensor:
        """z_t: (B, frames, d_z); t: (B,) ints in [1, T]."""
        if torch.any((t < 1) | (t > self.T)):
            raise ValidationError(f"step index outside [1, {self.T}]")
        cond = self.conditioning_stream(x, bins, e, null_mask)
        emb = self.step_mlp(step_embedding(t, self.step_dim).to(z_t.dtype))
        h = self.z_in(z_t.transpose(-1, -2))
        skip_sum = torch.zeros_like(h)
        for block in self.blocks:
            h, skip = block(h, emb, cond)
            skip_sum = skip_sum + skip
        skip_sum = skip_sum / math.sqrt(len(self.blocks))
        return self.post(skip_sum).transpose(-1, -2)


def denoise_eps(denoiser: Denoiser, z_t: torch.Tensor, t: int,
                cond: ConditionSet) -> torch.Tensor:
    """Single-clip noise prediction for a (frames, d_z) latent."""
    if not (1 <= t <= denoiser.T):
        raise ValidationError(f"t={t} outside [1, {denoiser.T}]")
    e = cond.e.values
    if cond.e.is_null:
        e = torch.zeros_like(denoiser.null_spk)
    null_mask = torch.tensor([cond.e.is_null])
    with torch.no_grad():
        out = denoiser(z_t.unsqueeze(0), torch.tensor([t]),
                       cond.x.values.unsqueeze(0),
                       cond.f0_bins.unsqueeze(0), e.unsqueeze(0), null_mask)
    return out.squeeze(0)


def sample_condition_drop(rng: torch.Generator, n: int,
                          p_uncond: float) -> torch.Tensor:
    """Joint (e, f0) drop decisions for one training step."""
    return torch.rand(n, generator=rng) < p_uncond


def ldm_loss(denoiser: Denoiser, z0: torch.Tensor, x: torch.Tensor,
             bins: torch.Tensor, e: torch.Tensor, sched: NoiseSchedule,
             p_uncond: float, rng: torch.Generator) -> torch.Tensor:
    """Noise-space MSE with joint condition dropping.

    Draws t ~ Uniform{1..T} and eps ~ N(0, I) per item, nulls (e, f0)
    together with probability p_uncond, and regresses the denoiser onto
    eps at the closed-form forward sample.
    """
    b = z0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=rng)
    eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    drop = sample_condition_drop(rng, b, p_uncond)
    bins_eff = torch.where(drop.unsqueeze(-1), torch.zeros_like(bins), bins)
    z_t = q_sample_batch(z0, t, eps, sched)
    pred = denoiser(z_t, t, x, bins_eff, e, drop)
    return ((eps - pred) ** 2).mean()


def cfg_eps(eps_cond: torch.Tensor, eps_uncond: torch.Tensor,
            w: float) -> torch.Tensor:
    """Classifier-free combination (1+w)*cond - w*uncond."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValidationError("guidance branches must have matching shapes")
    if w == 0.0:
        return eps_cond
    return (1.0 + w) * eps_cond - w * eps_uncond


def ddpm_step(z_t: torch.Tensor, t: int, eps_t: torch.Tensor,
              sched: NoiseSchedule,
              rng: torch.Generator | None = None) -> torch.Tensor:
    """One reverse step; the t=1 step is noise-free."""
    sched.check_t(t)
    alpha = sched.alpha[t - 1]
    abar = sched.alpha_bar[t - 1]
    coef = (1.0 - alpha) / math.sqrt(1.0 - abar)
    mean = (z_t - coef * eps_t) / math.sqrt(alpha)
    if t == 1:
        return mean
    noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
    return mean + float(sched.sigma[t - 1]) * noise


def sample(denoiser: Denoiser, cond: ConditionSet, w: float,
           sched: NoiseSchedule, rng: torch.Generator,
           d_z: int | None = None, return_trajectory: bool = False):
    """Ancestral sampling from pure noise, two denoiser calls per step
    under guidance (one when w = 0)."""
    frames = cond.x.frames
    if d_z is None:
        d_z = denoiser.z_in.in_channels
    z = torch.randn((frames, d_z), generator=rng)
    uncond = null_conditions(cond.x) if w != 0.0 else None
    trajectory = []
    for t in range(sched.T, 0, -1):
        eps_c = denoise_eps(denoiser, z, t, cond)
        if uncond is not None:
            eps_u = denoise_eps(denoiser, z, t, uncond)
            eps_t = cfg_eps(eps_c, eps_u, w)
        else:
            eps_t = eps_c
        z = ddpm_step(z, t, eps_t, sched, rng)
        if return_trajectory:
            trajectory.append(z.clone())
    return (z, trajectory) if return_trajectory else z


@dataclass
class LatentRecord:
    z0: torch.Tensor       # (frames, d_z), already divided by latent_scale
    x: torch.Tensor        # (frames, d_content)
    bins: torch.Tensor     # (frames,)
    e: torch.Tensor        # (d_spk,)


def prepare_latents(system: VaeSystem, manifest: DatasetManifest,
                    cfg: Config) -> tuple[list[LatentRecord], float]:
    """Posterior-mean latents plus conditions for every train clip, and
    the global scalar that standardizes the latent space."""
    records = load_training_clips(manifest, cfg, "train")
    out = []
    with torch.no_grad():
        sq_sum, count = 0.0, 0
        for rec in records:
            spec = stft_magnitude(rec.wav, cfg.fft_size, cfg.hop, cfg.win)
            e = system.speaker(rec.mel_full)
            _, z0 = posterior_encode(system.encoder, spec, e, deterministic=True)
            x = system.content(rec.mel_full)
            f0 = F0Contour(hz=rec.f0_hz, frame_hop=cfg.hop)
            bins = torch.from_numpy(
                quantize_log_f0(f0, cfg.f0_quant_lo, cfg.f0_quant_hi).idx)
            out.append(LatentRecord(z0=z0, x=x, bins=bins, e=e))
            sq_sum += float((z0 ** 2).sum())
            count += z0.numel()
    scale = math.sqrt(sq_sum / count) if count else 1.0
    scale = max(scale, 1e-6)
    for rec in out:
        rec.z0 = rec.z0 / scale
    return out, scale


def train_ldm(manifest: DatasetManifest, vae_ckpt: Checkpoint, cfg: Config,
              out_dir: str | Path | None = None, seed: int | None = None,
              resume: bool = True):
    """Latent-diffusion training against a frozen VAE checkpoint.

    Returns (denoiser, latent_scale, history); writes ldm_step*.ckpt
    files when ``out_dir`` is given.
    """
    from .vae import load_vae_system, _latest_ckpt

    if vae_ckpt.kind != "vae":
        raise StageOrderError("LDM training requires a VAE checkpoint")
    if vae_ckpt.config_hash != cfg.config_hash():
        raise StageOrderError("VAE checkpoint config does not match this config")
    seed = cfg.seed if seed is None else seed
    system = load_vae_system(vae_ckpt).freeze()
    latents, scale = prepare_latents(system, manifest, cfg)
    sched = linear_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)

    torch.manual_seed(derive_seed(seed, "ldm-init"))
    denoiser = Denoiser(cfg).train()
    opt = torch.optim.Adam(denoiser.parameters(), lr=cfg.ldm_lr)
    names = [n for n, _ in denoiser.named_parameters()]

    start_step, history = 0, []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            latest = _latest_ckpt(out, "ldm_step")
            if latest is not None:
                ckpt = load_checkpoint(latest, expected_hash=cfg.config_hash())
                denoiser = load_denoiser(ckpt).train()
                opt = torch.optim.Adam(denoiser.parameters(), lr=cfg.ldm_lr)
                from .vae import _load_adam_state
                _load_adam_state(opt, names, ckpt.tensors)
                start_step = int(ckpt.extras["step"])
                history = list(ckpt.extras["history"])
                scale = float(ckpt.extras["latent_scale"])

    min_frames = min(r.z0.shape[0] for r in latents)
    crop = min(cfg.crop_frames, min_frames)
    for step in range(start_step + 1, cfg.ldm_steps + 1):
        gen = torch.Generator().manual_seed(derive_seed(seed, f"ldm-step:{step}"))
        idx = torch.randint(0, len(latents), (cfg.batch_size,), generator=gen)
        z0s, xs, binss, es = [], [], [], []
        for j in idx.tolist():
            rec = latents[j]
            max_start = rec.z0.shape[0] - crop
            start = int(torch.randint(0, max_start + 1, (1,), generator=gen))
            z0s.append(rec.z0[start:start + crop])
            xs.append(rec.x[start:start + crop])
            binss.append(rec.bins[start:start + crop])
            es.append(rec.e)
        loss = ldm_loss(denoiser, torch.stack(z0s), torch.stack(xs),
                        torch.stack(binss), torch.stack(es), sched,
                        cfg.p_uncond, gen)
        if not torch.isfinite(loss):
            raise DivergenceError(f"LDM training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(denoiser.parameters(), cfg.grad_clip)
        opt.step()

        if step % cfg.log_interval == 0 or step == cfg.ldm_steps:
            history.append({"step": step, "loss": float(loss.detach())})
        if out is not None and (step % cfg.ckpt_interval == 0
                                or step == cfg.ldm_steps):
            save_ldm_checkpoint(out / f"ldm_step{step:06d}.ckpt", denoiser,
                                cfg, step, history, scale, opt)
    return denoiser.eval(), scale, history


def save_ldm_checkpoint(path: str | Path, denoiser: Denoiser, cfg: Config,
                        step: int, history: list[dict], latent_scale: float,
                        opt: torch.optim.Adam | None = None) -> None:
    from .vae import _adam_state_tensors
    tensors = {k: v.detach().numpy() for k, v in denoiser.state_dict().items()}
    if opt is not None:
        names = [n for n, _ in denoiser.named_parameters()]
        tensors.update(_adam_state_tensors(opt, names))
    save_checkpoint(path, "ldm", cfg, tensors,
                    extras={"step": step, "history": history,
                            "latent_scale": latent_scale,
                            "p_uncond": cfg.p_uncond, "w": cfg.guidance_w})


def load_denoiser(ckpt: Checkpoint) -> Denoiser:
    if ckpt.kind != "ldm":
        raise ValidationError(f"expected an LDM checkpoint, got {ckpt.kind!r}")
    denoiser = Denoiser(ckpt.config)
    state = {k: torch.from_numpy(v.copy())
             for k, v in ckpt.tensors.items() if not k.startswith("opt.")}
    denoiser.load_state_dict(state)
    return denoiser.eval()
