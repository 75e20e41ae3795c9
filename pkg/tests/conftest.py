import dataclasses

import numpy as np
import pytest
import torch

from latentsing.config import Config
from latentsing.synthdata import synth_dataset

TINY_OVERRIDES = dict(
    d_z=8, d_spk=16, d_content=24, d_f0=8,
    vae_channels=16, vae_blocks=2, dec_channels=12, spk_channels=16,
    denoiser_channels=16, denoiser_blocks=3, step_emb_dim=16,
    batch_size=3, crop_frames=16,
    vae_steps=80, ldm_steps=120, log_interval=10, ckpt_interval=40,
    n_singers=4, clips_per_singer=3, n_unseen=1, test_clips_per_seen=1,
    clip_seconds=1.2, seed=77,
)


def make_tiny_cfg(**extra) -> Config:
    return dataclasses.replace(Config(), **{**TINY_OVERRIDES, **extra}).validate()


@pytest.fixture(scope="session")
def tiny_cfg() -> Config:
    return make_tiny_cfg()


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    manifest = synth_dataset(out, tiny_cfg)
    return manifest


@pytest.fixture(scope="session")
def tiny_vae(tiny_cfg, tiny_dataset, tmp_path_factory):
    """A mechanically-trained (not converged) VAE checkpoint."""
    from latentsing.checkpoint import load_checkpoint
    from latentsing.vae import train_vae

    out = tmp_path_factory.mktemp("tiny_vae")
    system, history = train_vae(tiny_dataset, tiny_cfg, out_dir=out)
    path = out / f"vae_step{tiny_cfg.vae_steps:06d}.ckpt"
    return system, load_checkpoint(path), path, history


@pytest.fixture(scope="session")
def tiny_ldm(tiny_cfg, tiny_dataset, tiny_vae, tmp_path_factory):
    from latentsing.checkpoint import load_checkpoint
    from latentsing.diffusion import train_ldm

    _, vae_ckpt, _, _ = tiny_vae
    out = tmp_path_factory.mktemp("tiny_ldm")
    denoiser, scale, history = train_ldm(tiny_dataset, vae_ckpt, tiny_cfg,
                                         out_dir=out)
    path = out / f"ldm_step{tiny_cfg.ldm_steps:06d}.ckpt"
    return denoiser, scale, load_checkpoint(path), path


def make_sine(freq: float, seconds: float = 1.0, rate: int = 32000,
              amp: float = 0.4):
    from latentsing.audio import AudioClip

    t = np.arange(int(seconds * rate)) / rate
    return AudioClip(samples=(amp * np.sin(2 * np.pi * freq * t)).astype(np.float32),
                     sample_rate=rate)


def state_digest(module: torch.nn.Module) -> bytes:
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().numpy().tobytes())
    return h.digest()
