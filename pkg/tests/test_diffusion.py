import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentsing.conditioning import (ConditionSet, ContentFeatures,
                                     SpeakerEmbedding, null_conditions)
from latentsing.diffusion import (Denoiser, cfg_eps, ddpm_step, denoise_eps,
                                  ldm_loss, load_denoiser, sample,
                                  sample_condition_drop, train_ldm)
from latentsing.errors import StageOrderError, ValidationError
from latentsing.schedule import linear_schedule
from latentsing.vae import load_vae_system
from .conftest import make_tiny_cfg, state_digest
from .helpers import finite_difference_check, make_mini_cfg

# hand evaluation of the scalar reverse step with alpha = abar = 0.99,
# z_t = 1, eps = 0.5: (1/sqrt(0.99)) * (1 - (0.01/sqrt(0.01)) * 0.5)
HAND_REVERSE_STEP = 0.95478592449625144


@pytest.fixture(scope="module")
def cfg():
    return make_tiny_cfg()


@pytest.fixture(scope="module")
def sched():
    return linear_schedule(100, 1e-4, 0.06)


@pytest.fixture(scope="module")
def denoiser(cfg):
    torch.manual_seed(0)
    return Denoiser(cfg).eval()


def make_cond(cfg, frames=12, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = ContentFeatures(torch.randn(frames, cfg.d_content, generator=g))
    bins = torch.randint(1, 257, (frames,), generator=g)
    e = torch.randn(cfg.d_spk, generator=g)
    e = e / e.norm()
    return ConditionSet(x=x, f0_bins=bins, e=SpeakerEmbedding(e))


class TestDenoiser:
    @pytest.mark.parametrize("frames", [10, 100, 500])
    def test_shape_contract(self, cfg, denoiser, sched, frames):
        cond = make_cond(cfg, frames)
        z_t = torch.randn(frames, cfg.d_z)
        out = denoise_eps(denoiser, z_t, 37, cond)
        assert out.shape == z_t.shape

    def test_zero_initialized_output_projection(self, cfg, sched):
        torch.manual_seed(1)
        fresh = Denoiser(cfg)  # output projection starts at zero
        cond = make_cond(cfg, 8)
        out = denoise_eps(fresh, torch.randn(8, cfg.d_z), 5, cond)
        torch.testing.assert_close(out, torch.zeros_like(out))

    def test_speaker_changes_output(self, cfg, sched):
        torch.manual_seed(2)
        den = Denoiser(cfg)
        with torch.no_grad():  # open the output projection
            den.post[-1].weight.normal_(0, 0.1)
        cond_a = make_cond(cfg, 8, seed=1)
        e2 = torch.randn(cfg.d_spk, generator=torch.Generator().manual_seed(9))
        cond_b = ConditionSet(x=cond_a.x, f0_bins=cond_a.f0_bins,
                              e=SpeakerEmbedding(e2 / e2.norm()))
        z_t = torch.randn(8, cfg.d_z)
        out_a = denoise_eps(den, z_t, 10, cond_a)
        out_b = denoise_eps(den, z_t, 10, cond_b)
        assert float((out_a - out_b).norm()) > 0

    def test_nulled_conditions_change_output(self, cfg):
        torch.manual_seed(3)
        den = Denoiser(cfg)
        with torch.no_grad():
            den.post[-1].weight.normal_(0, 0.1)
        cond = make_cond(cfg, 8)
        z_t = torch.randn(8, cfg.d_z)
        out_c = denoise_eps(den, z_t, 10, cond)
        out_u = denoise_eps(den, z_t, 10, null_conditions(cond.x))
        assert float((out_c - out_u).norm()) > 0

    def test_step_range_checked(self, cfg, denoiser):
        cond = make_cond(cfg, 4)
        with pytest.raises(ValidationError):
            denoise_eps(denoiser, torch.randn(4, cfg.d_z), 0, cond)
        with pytest.raises(ValidationError):
            denoise_eps(denoiser, torch.randn(4, cfg.d_z), 101, cond)


class _OracleDenoiser(torch.nn.Module):
    """Recovers the exact forward noise when z0 = 0."""

    def __init__(self, sched):
        super().__init__()
        self.sched = sched

    def forward(self, z_t, t, x, bins, e, null_mask):
        abar = torch.from_numpy(self.sched.alpha_bar).to(z_t.dtype)[t - 1]
        return z_t / torch.sqrt(1 - abar).reshape(-1, 1, 1)


class _ZeroDenoiser(torch.nn.Module):
    def forward(self, z_t, t, x, bins, e, null_mask):
        return torch.zeros_like(z_t)


class _SpyDenoiser(torch.nn.Module):
    """Records the null mask of every call; predicts zeros."""

    def __init__(self):
        super().__init__()
        self.null_masks = []

    def forward(self, z_t, t, x, bins, e, null_mask):
        self.null_masks.append(null_mask.clone())
        return torch.zeros_like(z_t)


class TestLdmLoss:
    def test_perfect_oracle_gives_zero(self, cfg, sched):
        z0 = torch.zeros(3, 10, cfg.d_z)
        x = torch.randn(3, 10, cfg.d_content)
        bins = torch.randint(0, 257, (3, 10))
        e = torch.randn(3, cfg.d_spk)
        loss = ldm_loss(_OracleDenoiser(sched), z0, x, bins, e, sched, 0.0,
                        torch.Generator().manual_seed(0))
        assert float(loss) == pytest.approx(0.0, abs=1e-10)

    def test_zero_denoiser_unit_second_moment(self, cfg, sched):
        # E ||eps||^2 = 1 per element; pooled over a large draw
        g = torch.Generator().manual_seed(1)
        z0 = torch.randn(16, 64, cfg.d_z, generator=g)
        x = torch.randn(16, 64, cfg.d_content, generator=g)
        bins = torch.randint(0, 257, (16, 64), generator=g)
        e = torch.randn(16, cfg.d_spk, generator=g)
        losses = [float(ldm_loss(_ZeroDenoiser(), z0, x, bins, e, sched, 0.1,
                                 torch.Generator().manual_seed(s)))
                  for s in range(8)]
        assert np.mean(losses) == pytest.approx(1.0, rel=0.05)

    def test_condition_drop_rate_and_joint_nulling(self, cfg, sched):
        spy = _SpyDenoiser()
        z0 = torch.randn(1, 6, cfg.d_z)
        x = torch.randn(1, 6, cfg.d_content)
        bins = torch.randint(1, 257, (1, 6))
        e = torch.randn(1, cfg.d_spk)
        drops = 0
        n = 2000
        for s in range(n):
            g = torch.Generator().manual_seed(1000 + s)
            ldm_loss(spy, z0, x, bins, e, sched, 0.1, g)
            drops += int(spy.null_masks[-1][0])
        assert 0.07 < drops / n < 0.13

    def test_gradients_match_finite_differences(self, sched):
        cfg = make_mini_cfg()
        torch.manual_seed(5)
        den = Denoiser(cfg).double()
        with torch.no_grad():
            den.post[-1].weight.normal_(0, 0.2)
            den.post[-1].bias.normal_(0, 0.05)
        assert sum(p.numel() for p in den.parameters()) <= 1000
        g0 = torch.Generator().manual_seed(8)
        z0 = torch.randn(2, 5, cfg.d_z, generator=g0, dtype=torch.float64)
        x = torch.randn(2, 5, cfg.d_content, generator=g0, dtype=torch.float64)
        bins = torch.randint(0, 257, (2, 5), generator=g0)
        e = torch.randn(2, cfg.d_spk, generator=g0, dtype=torch.float64)

        def loss_fn():
            gen = torch.Generator().manual_seed(123)
            return ldm_loss(den, z0, x, bins, e, sched, 0.3, gen)

        worst = finite_difference_check(loss_fn, den, tol=1e-4)
        assert worst < 1e-4


class TestCfgEps:
    def test_w_zero_identity(self):
        a, b = torch.randn(4, 3), torch.randn(4, 3)
        out = cfg_eps(a, b, 0.0)
        assert out is a

    def test_equal_branches_cancel(self):
        a = torch.randn(4, 3)
        for w in (0.0, 0.3, 2.0):
            torch.testing.assert_close(cfg_eps(a, a.clone(), w), a)

    def test_scalar_case(self):
        out = cfg_eps(torch.tensor([1.0]), torch.tensor([0.0]), 0.3)
        assert float(out) == pytest.approx(1.3, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            cfg_eps(torch.randn(3), torch.randn(4), 0.3)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(min_value=0, max_value=5),
           st.integers(min_value=0, max_value=2 ** 31))
    def test_affine_in_both_arguments(self, w, seed):
        g = torch.Generator().manual_seed(seed)
        a, b, c, d = (torch.randn(5, 2, generator=g, dtype=torch.float64)
                      for _ in range(4))
        lhs = cfg_eps(a, b, w) + cfg_eps(c, d, w)
        rhs = cfg_eps(a + c, b + d, w)
        torch.testing.assert_close(lhs, rhs, rtol=0, atol=1e-12)


class TestDdpmStep:
    def test_hand_computed_scalar(self):
        sched1 = linear_schedule(1, 0.01, 0.01)
        out = ddpm_step(torch.tensor([[1.0]], dtype=torch.float64), 1,
                        torch.tensor([[0.5]], dtype=torch.float64), sched1)
        assert float(out) == pytest.approx(HAND_REVERSE_STEP, abs=1e-9)

    def test_t1_deterministic(self, sched):
        z = torch.randn(6, 4)
        eps = torch.randn(6, 4)
        a = ddpm_step(z, 1, eps, sched, torch.Generator().manual_seed(0))
        b = ddpm_step(z, 1, eps, sched, torch.Generator().manual_seed(999))
        torch.testing.assert_close(a, b)

    def test_t1_zero_eps(self, sched):
        z = torch.randn(6, 4, dtype=torch.float64)
        out = ddpm_step(z, 1, torch.zeros_like(z), sched)
        torch.testing.assert_close(out, z / math.sqrt(sched.alpha[0]))

    def test_noise_enters_above_t1(self, sched):
        z = torch.randn(6, 4)
        eps = torch.randn(6, 4)
        a = ddpm_step(z, 50, eps, sched, torch.Generator().manual_seed(0))
        b = ddpm_step(z, 50, eps, sched, torch.Generator().manual_seed(1))
        assert not torch.allclose(a, b)

    def test_range_check(self, sched):
        z = torch.randn(2, 2)
        with pytest.raises(ValidationError):
            ddpm_step(z, 0, z, sched)


class _CountingDenoiser(torch.nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.calls = 0

    @property
    def T(self):
        return self.inner.T

    @property
    def z_in(self):
        return self.inner.z_in

    @property
    def null_spk(self):
        return self.inner.null_spk

    def forward(self, *args, **kwargs):
        self.calls += 1
        return self.inner(*args, **kwargs)


class TestSample:
    def test_fixed_seed_bit_identical(self, cfg, denoiser, sched):
        cond = make_cond(cfg, 9)
        z1 = sample(denoiser, cond, 0.3, sched,
                    torch.Generator().manual_seed(4), d_z=cfg.d_z)
        z2 = sample(denoiser, cond, 0.3, sched,
                    torch.Generator().manual_seed(4), d_z=cfg.d_z)
        assert torch.equal(z1, z2)
        assert z1.shape == (9, cfg.d_z)

    def test_w_zero_matches_conditional_only_reference(self, cfg, denoiser, sched):
        cond = make_cond(cfg, 9)
        z, trajectory = sample(denoiser, cond, 0.0, sched,
                               torch.Generator().manual_seed(7), d_z=cfg.d_z,
                               return_trajectory=True)
        # independent conditional-only sampler with the same noise stream
        gen = torch.Generator().manual_seed(7)
        z_ref = torch.randn((9, cfg.d_z), generator=gen)
        for i, t in enumerate(range(sched.T, 0, -1)):
            eps = denoise_eps(denoiser, z_ref, t, cond)
            z_ref = ddpm_step(z_ref, t, eps, sched, gen)
            assert float((z_ref - trajectory[i]).abs().max()) < 1e-6
        torch.testing.assert_close(z, z_ref)

    def test_denoiser_call_budget(self, cfg, denoiser, sched):
        cond = make_cond(cfg, 5)
        counting = _CountingDenoiser(denoiser)
        sample(counting, cond, 0.3, sched, torch.Generator().manual_seed(0),
               d_z=cfg.d_z)
        assert counting.calls == 2 * sched.T
        counting.calls = 0
        sample(counting, cond, 0.0, sched, torch.Generator().manual_seed(0),
               d_z=cfg.d_z)
        assert counting.calls == sched.T


class TestTrainLdm:
    def test_requires_vae_checkpoint(self, tiny_cfg, tiny_dataset, tiny_ldm):
        _, _, ldm_ckpt, _ = tiny_ldm
        with pytest.raises(StageOrderError):
            train_ldm(tiny_dataset, ldm_ckpt, tiny_cfg)

    def test_config_mismatch_rejected(self, tiny_dataset, tiny_vae):
        _, vae_ckpt, _, _ = tiny_vae
        other = make_tiny_cfg(d_z=4)
        with pytest.raises(StageOrderError):
            train_ldm(tiny_dataset, vae_ckpt, other)

    def test_vae_frozen_during_training(self, tiny_cfg, tiny_dataset, tiny_vae):
        _, vae_ckpt, _, _ = tiny_vae
        before = load_vae_system(vae_ckpt)
        digest_before = state_digest(before)
        train_ldm(tiny_dataset, vae_ckpt, tiny_cfg)
        assert state_digest(load_vae_system(vae_ckpt)) == digest_before

    def test_run_artifacts(self, tiny_cfg, tiny_ldm):
        denoiser, scale, ckpt, path = tiny_ldm
        assert ckpt.kind == "ldm"
        assert ckpt.extras["latent_scale"] == pytest.approx(scale)
        assert ckpt.extras["p_uncond"] == tiny_cfg.p_uncond
        assert ckpt.extras["w"] == tiny_cfg.guidance_w
        assert scale > 0
        restored = load_denoiser(ckpt)
        assert state_digest(restored) == state_digest(denoiser)

    def test_determinism(self, tiny_cfg, tiny_dataset, tiny_vae, tiny_ldm):
        _, vae_ckpt, _, _ = tiny_vae
        denoiser, scale, _, _ = tiny_ldm
        den2, s2, _ = train_ldm(tiny_dataset, vae_ckpt, tiny_cfg)
        assert s2 == pytest.approx(scale, rel=0)
        assert state_digest(den2) == state_digest(denoiser)

    def test_resume_matches_uninterrupted(self, tiny_cfg, tiny_dataset,
                                          tiny_vae, tiny_ldm, tmp_path):
        import shutil
        _, vae_ckpt, _, _ = tiny_vae
        denoiser_full, _, _, full_path = tiny_ldm
        # simulate an interrupted run: only a mid-run checkpoint survives
        mid = full_path.parent / f"ldm_step{tiny_cfg.ckpt_interval:06d}.ckpt"
        (tmp_path / "resumed").mkdir()
        shutil.copy(mid, tmp_path / "resumed" / mid.name)
        den_res, _, _ = train_ldm(tiny_dataset, vae_ckpt, tiny_cfg,
                                  out_dir=tmp_path / "resumed")
        assert state_digest(den_res) == state_digest(denoiser_full)
        assert ((tmp_path / "resumed" / full_path.name).read_bytes()
                == full_path.read_bytes())


class TestConditionDropHelper:
    def test_rate(self):
        g = torch.Generator().manual_seed(0)
        draws = torch.cat([sample_condition_drop(g, 10, 0.1)
                           for _ in range(1000)])
        assert 0.08 < float(draws.float().mean()) < 0.12

    def test_zero_probability(self):
        g = torch.Generator().manual_seed(0)
        assert not sample_condition_drop(g, 100, 0.0).any()
