"""Forward noising, reverse-process mean, training objectives, sampling and the score-gradient readout."""

from __future__ import annotations

import math

import numpy as np
import torch

from .schedule import NoiseSchedule

RMS_FLOOR = 1e-12


def tau_discretize(tau: float, T: int) -> int:
    """Continuous diffusion time in [0, 1] to a step index in [1, T]."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("continuous diffusion time must lie in [0, 1]")
    return int(min(max(math.floor(tau * T + 0.5), 1), T))


def q_sample(x0: torch.Tensor, tau, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    schedule.check_step(tau)
    ab = schedule.gather("alpha_bar", tau, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def posterior_mean(x_tau: torch.Tensor, eps_hat: torch.Tensor, tau, schedule: NoiseSchedule) -> torch.Tensor:
    if x_tau.shape != eps_hat.shape:
        raise ValueError("x_tau and eps_hat must have the same shape")
    alpha = schedule.gather("alpha", tau, x_tau)
    beta = schedule.gather("beta", tau, x_tau)
    ab = schedule.gather("alpha_bar", tau, x_tau)
    return (x_tau - beta / torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(alpha)


def loss_weight(schedule: NoiseSchedule, tau) -> np.ndarray:
    """``beta / (2 alpha (1 - alpha_bar))`` at the given steps."""
    return schedule.beta[tau] / (2.0 * schedule.alpha[tau] * (1.0 - schedule.alpha_bar[tau]))


def ddm_training_loss(model, x0: torch.Tensor, schedule: NoiseSchedule, generator: torch.Generator | None = None,
                      objective: str = "weighted", tau=None, noise=None) -> torch.Tensor:
    """Monte-Carlo estimate of the noise-prediction objective on a batch.

    ``objective="weighted"`` is ``E[w(tau) * ||eps - eps_theta||]`` with the
    per-step weight of :func:`loss_weight` and the Euclidean norm over each
    patch. ``objective="simple"`` is the unweighted mean squared error.
    ``tau`` and ``noise`` may be supplied to pin the draws.
    """
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    b = x0.shape[0]
    if tau is None:
        tau = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    tau = torch.as_tensor(tau, dtype=torch.long).reshape(-1).expand(b)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    pred = model(q_sample(x0, tau, noise, schedule), tau)
    resid = (noise - pred).reshape(b, -1)
    if objective == "weighted":
        w = torch.as_tensor(loss_weight(schedule, tau.numpy()), dtype=x0.dtype)
        return (w * resid.norm(dim=1)).mean()
    if objective == "simple":
        return (resid ** 2).mean()
    raise ValueError(f"unknown objective {objective!r}")


@torch.no_grad()
def ancestral_sample(model, schedule: NoiseSchedule, n: int, shape, seed: int = 0, clamp: bool = True,
                     dtype=torch.float32) -> torch.Tensor:
    """Draw ``n`` samples of ``shape`` by iterating the learned reverse transitions from T down to 1."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((n,) + tuple(shape), generator=gen, dtype=dtype)
    for tau in range(schedule.T, 0, -1):
        mean = posterior_mean(x, model(x, torch.full((n,), tau, dtype=torch.long)), tau, schedule)
        if tau > 1:
            x = mean + math.sqrt(schedule.beta_tilde[tau]) * torch.randn(x.shape, generator=gen, dtype=dtype)
        else:
            x = mean
    return x.clamp(-1.0, 1.0) if clamp else x


def normalize_blocks(eps: torch.Tensor) -> torch.Tensor:
    """Rescale the RGB channels and the depth channel of each patch to unit RMS independently."""
    out = torch.zeros_like(eps)
    for sl in (slice(0, 3), slice(3, 4)):
        block = eps[..., sl]
        dims = tuple(range(block.dim() - 3, block.dim()))
        rms = block.pow(2).mean(dim=dims, keepdim=True).sqrt()
        out[..., sl] = torch.where(rms > RMS_FLOOR, block / rms.clamp_min(RMS_FLOOR), torch.zeros_like(block))
    return out


@torch.no_grad()
def score_gradient(model, patch: torch.Tensor, tau: float, schedule: NoiseSchedule) -> torch.Tensor:
    """Normalized noise prediction for a patch (or batch of patches).

    The result points away from the data modes: ``-score_gradient`` is an
    ascent direction on the patch log-density.
    """
    if not torch.isfinite(patch).all():
        raise ValueError("score_gradient: patch contains non-finite entries")
    single = patch.dim() == 3
    x = patch[None] if single else patch
    step = tau_discretize(tau, schedule.T)
    eps = model(x, torch.full((x.shape[0],), step, dtype=torch.long))
    g = normalize_blocks(eps)
    return g[0] if single else g


def gaussian_optimal_eps(x_tau: torch.Tensor, tau, mean: float, std: float, schedule: NoiseSchedule) -> torch.Tensor:
    """Minimum-MSE noise predictor ``E[eps | x_tau]`` for data ``N(mean, std^2 I)``."""
    ab = schedule.gather("alpha_bar", tau, x_tau)
    var = ab * std ** 2 + 1.0 - ab
    return torch.sqrt(1.0 - ab) / var * (x_tau - torch.sqrt(ab) * mean)


def gaussian_score(x_tau: torch.Tensor, tau, mean: float, std: float, schedule: NoiseSchedule) -> torch.Tensor:
    """Exact score of the noised marginal of ``N(mean, std^2 I)`` data; ``tau=0`` gives the data score."""
    ab = schedule.gather("alpha_bar", tau, x_tau)
    var = ab * std ** 2 + 1.0 - ab
    return -(x_tau - torch.sqrt(ab) * mean) / var
