import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbdprior.ddm import (
    DDMTrainConfig,
    DDMTrainer,
    Denoiser,
    DenoiserConfig,
    NoiseSchedule,
    ancestral_sample,
    ddm_training_loss,
    decode_rgbd,
    encode_depth,
    encode_rgbd,
    gaussian_optimal_eps,
    gaussian_score,
    load_ddm,
    loss_weight,
    posterior_mean,
    q_sample,
    save_ddm,
    score_gradient,
    tau_discretize,
)

SCHED = NoiseSchedule.linear()
TINY = DenoiserConfig(widths=(8, 16, 32), blocks_per_scale=1, groups=4, embed_dim=16)


def test_schedule_tables():
    s = SCHED
    assert s.T == 1000
    assert s.beta[1] == pytest.approx(1e-4) and s.beta[1000] == pytest.approx(2e-2)
    np.testing.assert_allclose(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:], rtol=1e-14)
    assert np.all(np.diff(s.alpha_bar[1:]) < 0)
    assert s.alpha_bar[-1] < 1e-2
    bt = s.beta_tilde[2:]
    assert np.all(bt > 0) and np.all(bt <= s.beta[2:])
    # first reverse step is noiseless by construction
    assert s.beta_tilde[1] == 0.0


def test_schedule_rejects_bad_beta():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.1, 1.0]))
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([]))


def test_tau_discretize_examples():
    assert tau_discretize(0.0, 1000) == 1
    assert tau_discretize(1.0, 1000) == 1000
    assert tau_discretize(0.1, 1000) == 100
    with pytest.raises(ValueError):
        tau_discretize(1.5, 1000)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
def test_q_sample_round_trip(tau, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(2, 4, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    xt = q_sample(x0, tau, eps, SCHED)
    ab = SCHED.alpha_bar[tau]
    back = (xt - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    assert (back - x0).abs().max().item() <= 1e-10


def test_q_sample_limits_and_range():
    x0 = torch.rand(3, 4, dtype=torch.float64)
    eps = torch.randn(3, 4, dtype=torch.float64)
    near_clean = NoiseSchedule(np.full(1, 1e-20))
    np.testing.assert_allclose(q_sample(x0, 1, eps, near_clean).numpy(), x0.numpy(), atol=1e-9)
    near_noise = NoiseSchedule(np.full(50, 0.999))
    np.testing.assert_allclose(q_sample(x0, 50, eps, near_noise).numpy(), eps.numpy(), atol=1e-12)
    for bad in (0, 1001):
        with pytest.raises(ValueError):
            q_sample(x0, bad, eps, SCHED)


def test_q_sample_variance_monte_carlo():
    g = torch.Generator().manual_seed(0)
    x0 = torch.full((10_000, 1), 0.3, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    for tau in (10, 300, 900):
        var = q_sample(x0, tau, eps, SCHED).var().item()
        assert var == pytest.approx(1 - SCHED.alpha_bar[tau], rel=0.05)


def test_loss_with_zero_predictor_matches_expected_noise_norm():
    def zero(x, tau):
        return torch.zeros_like(x)

    g = torch.Generator().manual_seed(0)
    x0 = torch.zeros(20_000, 2, 2, 4, dtype=torch.float64)
    k = 16
    mean_norm = math.sqrt(2) * math.exp(math.lgamma((k + 1) / 2) - math.lgamma(k / 2))
    got = ddm_training_loss(zero, x0, SCHED, g, tau=200).item()
    assert got == pytest.approx(loss_weight(SCHED, 200) * mean_norm, rel=0.05)
    got = ddm_training_loss(zero, x0, SCHED, g).item()
    assert got == pytest.approx(loss_weight(SCHED, np.arange(1, 1001)).mean() * mean_norm, rel=0.05)
    assert ddm_training_loss(zero, x0[:5000], SCHED, g, objective="simple").item() == pytest.approx(1.0, rel=0.05)


def test_loss_with_teacher_forced_oracle_is_zero():
    x0 = torch.rand(8, 4, 4, 4, dtype=torch.float64)
    noise = torch.randn(x0.shape, dtype=torch.float64)
    oracle = lambda x, tau: noise  # noqa: E731
    for objective in ("weighted", "simple"):
        assert ddm_training_loss(oracle, x0, SCHED, noise=noise, objective=objective).item() == 0.0


def test_posterior_mean_examples():
    x = torch.randn(5, 3, dtype=torch.float64)
    np.testing.assert_allclose(posterior_mean(x, torch.zeros_like(x), 400, SCHED).numpy(),
                               x.numpy() / math.sqrt(SCHED.alpha[400]), rtol=1e-14)
    # affine in eps_hat
    e1, e2 = torch.randn(5, 3, dtype=torch.float64), torch.randn(5, 3, dtype=torch.float64)
    mid = posterior_mean(x, 0.5 * (e1 + e2), 400, SCHED)
    avg = 0.5 * (posterior_mean(x, e1, 400, SCHED) + posterior_mean(x, e2, 400, SCHED))
    np.testing.assert_allclose(mid.numpy(), avg.numpy(), rtol=1e-13)
    # single-step chain: the exact noise recovers x0
    one = NoiseSchedule(np.array([0.3]))
    x0, eps = torch.randn(5, 3, dtype=torch.float64), torch.randn(5, 3, dtype=torch.float64)
    np.testing.assert_allclose(posterior_mean(q_sample(x0, 1, eps, one), eps, 1, one).numpy(), x0.numpy(),
                               atol=1e-14)


def test_denoiser_shapes_and_finiteness():
    torch.manual_seed(0)
    m = Denoiser(TINY)
    with torch.no_grad():
        for p in m.parameters():
            p.normal_(0, 0.2)
        x = torch.rand(3, 12, 12, 4) * 4 - 2
        y = m(x, torch.tensor([1, 500, 1000]))
    assert y.shape == x.shape and torch.isfinite(y).all()


def test_score_gradient_normalization():
    g = torch.Generator().manual_seed(0)
    base = torch.randn(2, 8, 8, 4, generator=g)
    model = lambda x, tau: base[: x.shape[0]]  # noqa: E731
    patch = torch.zeros(2, 8, 8, 4)
    out = score_gradient(model, patch, 0.05, SCHED)
    rms_rgb = out[..., :3].pow(2).mean((1, 2, 3)).sqrt()
    rms_d = out[..., 3].pow(2).mean((1, 2)).sqrt()
    np.testing.assert_allclose(rms_rgb.numpy(), 1.0, rtol=1e-6)
    np.testing.assert_allclose(rms_d.numpy(), 1.0, rtol=1e-6)
    scaled = score_gradient(lambda x, tau: 10 * base[: x.shape[0]], patch, 0.05, SCHED)
    np.testing.assert_allclose(scaled.numpy(), out.numpy(), rtol=1e-6)
    zero = score_gradient(lambda x, tau: torch.zeros_like(x), patch[0], 0.0, SCHED)
    assert zero.shape == (8, 8, 4) and torch.all(zero == 0)
    with pytest.raises(ValueError):
        score_gradient(model, torch.full((8, 8, 4), float("inf")), 0.0, SCHED)


def test_score_gradient_zeroes_only_the_silent_block():
    out = score_gradient(lambda x, tau: torch.cat([torch.ones_like(x[..., :3]), torch.zeros_like(x[..., 3:])], -1),
                         torch.zeros(4, 4, 4), 0.0, SCHED)
    assert torch.all(out[..., :3] == 1) and torch.all(out[..., 3] == 0)


def test_gaussian_oracle_predictor_is_posterior_mean_of_noise():
    # E[eps | x_tau] by Monte-Carlo binning in one dimension
    g = torch.Generator().manual_seed(0)
    m, s, tau = 0.2, 0.3, 300
    x0 = m + s * torch.randn(400_000, generator=g, dtype=torch.float64)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    xt = q_sample(x0, tau, eps, SCHED)
    sel = (xt - 0.5).abs() < 0.01
    mc = eps[sel].mean().item()
    exact = gaussian_optimal_eps(torch.tensor([0.5], dtype=torch.float64), tau, m, s, SCHED).item()
    assert mc == pytest.approx(exact, abs=0.02)
    # score relation: eps* = -sqrt(1 - alpha_bar) * score of the noised marginal
    x = torch.linspace(-1, 1, 11, dtype=torch.float64)
    np.testing.assert_allclose(gaussian_optimal_eps(x, tau, m, s, SCHED).numpy(),
                               (-math.sqrt(1 - SCHED.alpha_bar[tau]) * gaussian_score(x, tau, m, s, SCHED)).numpy(),
                               rtol=1e-13)


def test_untrained_sampler_is_finite():
    torch.manual_seed(0)
    out = ancestral_sample(Denoiser(TINY), NoiseSchedule.linear(T=50), 3, (8, 8, 4), seed=1)
    assert out.shape == (3, 8, 8, 4) and torch.isfinite(out).all()
    assert out.abs().max() <= 1.0


def test_two_mode_toy_recovers_both_modes():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    sign = rng.choice([-1.0, 1.0], 4000)
    data = (0.5 * sign[:, None, None, None] + 0.05 * rng.standard_normal((4000, 4, 4, 4))).astype(np.float32)
    sched = NoiseSchedule.linear(T=100, beta_end=0.2)
    model = Denoiser(TINY)
    DDMTrainer(model, sched, data, DDMTrainConfig(steps=1500, batch_size=64, lr=2e-3, warmup=50, log_every=0)).train()
    samples = ancestral_sample(model, sched, 64, (4, 4, 4), seed=2)
    means = samples.mean((1, 2, 3)).numpy()
    assert (means > 0.25).sum() >= 5 and (means < -0.25).sum() >= 5


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    m = Denoiser(TINY)
    with torch.no_grad():
        for p in m.parameters():
            p.normal_(0, 0.1)
    save_ddm(tmp_path / "d.npz", m, SCHED, patch_size=8, scene_scale=2.0, step=7)
    m2, s2, meta = load_ddm(tmp_path / "d.npz")
    assert meta["version"] == "ddm-v1" and meta["step"] == 7 and meta["scene_scale"] == 2.0
    np.testing.assert_array_equal(s2.alpha_bar, SCHED.alpha_bar)
    x = torch.randn(2, 8, 8, 4)
    assert torch.equal(m(x, torch.tensor([3, 700])), m2(x, torch.tensor([3, 700])))


def test_trainer_resume_matches_uninterrupted_run():
    data = np.random.default_rng(0).uniform(-1, 1, (64, 4, 4, 4)).astype(np.float32)
    cfg = DDMTrainConfig(steps=6, batch_size=8, log_every=0)

    def fresh():
        torch.manual_seed(0)
        return DDMTrainer(Denoiser(TINY), SCHED, data, cfg)

    full = fresh()
    full.train(6)
    part = fresh()
    part.train(3)
    state = part.optimizer_state()
    resumed = DDMTrainer(part.model, SCHED, data, cfg)
    resumed.load_optimizer_state(state)
    resumed.train(3)
    assert resumed.step == 6
    assert resumed.losses == full.losses


def test_rgbd_encoding_round_trip_and_range():
    rgb = np.random.default_rng(0).uniform(0, 1, (5, 5, 3))
    depth = np.random.default_rng(1).uniform(0, 50, (5, 5))
    patch = encode_rgbd(rgb, depth, 2.0)
    assert patch.min() >= -1 and patch.max() <= 1
    rgb2, depth2 = decode_rgbd(patch, 2.0)
    np.testing.assert_allclose(rgb2, rgb, atol=1e-15)
    np.testing.assert_allclose(depth2, depth, rtol=1e-12)
    assert encode_depth(0.0, 1.0) == 1.0 and encode_depth(1.0, 1.0) == 0.0
