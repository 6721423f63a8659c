"""Train a patch denoiser on Gaussian data and compare it with the closed-form answer.

For data N(m, s^2) every quantity the prior provides has an exact expression,
which makes this the cleanest end-to-end check of the diffusion code.

Run: python demos/02_gaussian_prior.py [--steps 6000]
"""

import argparse

import numpy as np
import torch

from rgbdprior.ddm import (
    DDMTrainConfig,
    DDMTrainer,
    Denoiser,
    DenoiserConfig,
    NoiseSchedule,
    ancestral_sample,
    gaussian_optimal_eps,
    gaussian_score,
    q_sample,
    score_gradient,
)

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=6000)
args = parser.parse_args()

MEAN, STD, P = 0.25, 0.25, 8
torch.manual_seed(0)
data = (MEAN + STD * np.random.default_rng(0).standard_normal((20_000, P, P, 4))).astype(np.float32)
model = Denoiser(DenoiserConfig(widths=(16, 32, 64), blocks_per_scale=1))
schedule = NoiseSchedule.linear()
losses = DDMTrainer(model, schedule, data, DDMTrainConfig(steps=args.steps, lr=1e-3, log_every=0)).train()
print(f"training loss: first 100 steps {np.mean(losses[:100]):.3f}, last 500 steps {np.mean(losses[-500:]):.4f}")

gen = torch.Generator().manual_seed(1)
with torch.no_grad():
    for tau in (100, 500, 900):
        x0 = MEAN + STD * torch.randn(512, P, P, 4, generator=gen)
        xt = q_sample(x0, tau, torch.randn(512, P, P, 4, generator=gen), schedule)
        pred = model(xt, torch.full((512,), tau))
        best = gaussian_optimal_eps(xt, tau, MEAN, STD, schedule)
        print(f"step {tau}: relative L2 to the optimal predictor {float((pred - best).norm() / best.norm()):.3f}")

    # The negated prior gradient should point up the data log-density.
    x = MEAN + STD * torch.randn(256, P, P, 4, generator=gen)
    for tau in (0.0, 0.05, 0.1):
        g = score_gradient(model, x, tau, schedule)
        cos = torch.nn.functional.cosine_similarity((-g).reshape(256, -1),
                                                    gaussian_score(x, 0, MEAN, STD, schedule).reshape(256, -1))
        print(f"tau {tau}: cosine to the data score {float(cos.mean()):.3f}")

samples = ancestral_sample(model, schedule, 256, (P, P, 4), seed=3)
print(f"samples: mean {float(samples.mean()):.3f} (data {MEAN}), std {float(samples.std()):.3f} (data {STD})")
