"""Shared oracles for the test suite."""

import dataclasses

import torch

from latentsing.config import Config


def make_mini_cfg(**extra) -> Config:
    """A sub-1k-parameter configuration for finite-difference checks."""
    mini = dict(
        fft_size=16, hop=4, win=8, mel_bins=6,
        d_z=2, d_spk=3, d_content=4, d_f0=3,
        vae_channels=3, vae_blocks=1, dec_channels=4, spk_channels=4,
        denoiser_channels=4, denoiser_blocks=2, step_emb_dim=4,
        batch_size=2, crop_frames=4,
        n_singers=2, clips_per_singer=2, n_unseen=1, test_clips_per_seen=1,
    )
    return dataclasses.replace(Config(), **{**mini, **extra})


def finite_difference_check(loss_fn, module: torch.nn.Module,
                            coords_per_tensor: int = 3,
                            h: float = 1e-6, tol: float = 1e-4) -> float:
    """Compare autograd gradients of ``loss_fn()`` against central finite
    differences on a deterministic subset of coordinates of every
    parameter, as a norm-wise relative error per tensor. ``loss_fn`` must
    be deterministic across calls (seed any internal randomness). Returns
    the worst relative error."""
    params = dict(module.named_parameters())
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in params.items()}

    worst = 0.0
    all_ag, all_fd = [], []
    for name, p in params.items():
        flat = p.detach().reshape(-1)
        n = flat.numel()
        picks = sorted({0, n // 2, n - 1, (7 * n) // 11})[:coords_per_tensor + 1]
        ag_vec, fd_vec = [], []
        for i in picks:
            orig = float(flat[i])
            step = h * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + step
            up = float(loss_fn())
            with torch.no_grad():
                flat[i] = orig - step
            down = float(loss_fn())
            with torch.no_grad():
                flat[i] = orig
            fd_vec.append((up - down) / (2 * step))
            ag_vec.append(float(grads[name].reshape(-1)[i]))
        ag_t = torch.tensor(ag_vec, dtype=torch.float64)
        fd_t = torch.tensor(fd_vec, dtype=torch.float64)
        denom = max(float(ag_t.norm()), float(fd_t.norm()), 1e-8)
        rel = float((ag_t - fd_t).norm()) / denom
        worst = max(worst, rel)
        assert rel < tol, (f"{name}: autograd {ag_vec} vs finite diff "
                           f"{fd_vec} (rel {rel:.3g})")
        all_ag.extend(ag_vec)
        all_fd.extend(fd_vec)
    ag_t = torch.tensor(all_ag, dtype=torch.float64)
    fd_t = torch.tensor(all_fd, dtype=torch.float64)
    overall = float((ag_t - fd_t).norm()) / max(float(ag_t.norm()), 1e-8)
    assert overall < tol
    return max(worst, overall)
