"""Convolutional encoder-decoder noise predictor with sinusoidal step embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 4
    widths: tuple = (64, 128, 256)
    blocks_per_scale: int = 2
    groups: int = 8
    embed_dim: int = 64


def timestep_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=tau.device) / half)
    args = tau.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], -1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(min(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Predicts the noise in a batch of channel-last patches ``(B, P, P, C)`` at integer steps ``tau``.

    ``P`` must be divisible by ``2 ** (len(widths) - 1)``.
    """

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        t_dim = 4 * cfg.embed_dim
        self.t_mlp = nn.Sequential(nn.Linear(cfg.embed_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.inc = nn.Conv2d(cfg.channels, cfg.widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        skip_ch = [cfg.widths[0]]
        ch = cfg.widths[0]
        for i, w in enumerate(cfg.widths):
            for _ in range(cfg.blocks_per_scale):
                self.down.append(ResBlock(ch, w, t_dim, cfg.groups))
                ch = w
                skip_ch.append(ch)
            if i < len(cfg.widths) - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_ch.append(ch)

        self.mid = ResBlock(ch, ch, t_dim, cfg.groups)

        self.up = nn.ModuleList()
        for i, w in reversed(list(enumerate(cfg.widths))):
            for _ in range(cfg.blocks_per_scale + 1):
                self.up.append(ResBlock(ch + skip_ch.pop(), w, t_dim, cfg.groups))
                ch = w
            if i > 0:
                self.up.append(nn.Upsample(scale_factor=2, mode="nearest"))
                self.up.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.out_norm = nn.GroupNorm(min(cfg.groups, ch), ch)
        self.out = nn.Conv2d(ch, cfg.channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, tau) -> torch.Tensor:
        tau = torch.as_tensor(tau, device=x.device).reshape(-1).expand(x.shape[0])
        temb = self.t_mlp(timestep_embedding(tau, self.config.embed_dim))
        h = self.inc(x.permute(0, 3, 1, 2))
        hs = [h]
        for layer in self.down:
            h = layer(h, temb) if isinstance(layer, ResBlock) else layer(h)
            hs.append(h)
        h = self.mid(h, temb)
        for layer in self.up:
            if isinstance(layer, ResBlock):
                h = layer(torch.cat([h, hs.pop()], 1), temb)
            else:
                h = layer(h)
        out = self.out(F.silu(self.out_norm(h)))
        return out.permute(0, 2, 3, 1)
