from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class NoiseSchedule:
    """Discrete variance schedule with tables indexed by step ``0..T``.

    Index 0 is padding for the clean data (``beta=0``, ``alpha_bar=1``) so that
    ``alpha_bar[tau - 1]`` is always defined for ``tau >= 1``.
    """

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D table")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        self.beta = np.concatenate([[0.0], beta])
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        # the first step has alpha_bar_0 = 1, so its posterior variance is exactly 0
        self.beta_tilde = np.zeros_like(self.beta)
        self.beta_tilde[2:] = (1.0 - self.alpha_bar[1:-1]) / (1.0 - self.alpha_bar[2:]) * self.beta[2:]

    @property
    def T(self) -> int:
        return self.beta.size - 1

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, T))

    def check_step(self, tau) -> None:
        t = np.asarray(tau.cpu() if isinstance(tau, torch.Tensor) else tau)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"diffusion step must lie in [1, {self.T}]")

    def gather(self, name: str, tau, like: torch.Tensor) -> torch.Tensor:
        """Table ``name`` at ``tau`` (scalar or per-batch), shaped to broadcast against ``like``."""
        table = torch.as_tensor(getattr(self, name), dtype=like.dtype, device=like.device)
        tau = torch.as_tensor(tau, dtype=torch.long, device=like.device)
        vals = table[tau]
        return vals.reshape(vals.shape + (1,) * (like.dim() - vals.dim()))
