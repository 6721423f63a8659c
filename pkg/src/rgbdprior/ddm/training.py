from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .diffusion import ddm_training_loss
from .network import Denoiser, DenoiserConfig
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "ddm-v1"
REFERENCE_TRAIN_STEPS = 650_000
REFERENCE_BATCH_SIZE = 32


@dataclass
class DDMTrainConfig:
    steps: int = 50_000
    batch_size: int = REFERENCE_BATCH_SIZE
    lr: float = 2e-4
    warmup: int = 200
    grad_clip: float = 1.0
    objective: str = "simple"
    seed: int = 0
    log_every: int = 100


class DDMTrainer:
    """Optimization loop over a fixed array of patches ``(N, P, P, 4)``."""

    def __init__(self, model: Denoiser, schedule: NoiseSchedule, patches: np.ndarray,
                 config: DDMTrainConfig | None = None):
        self.model = model
        self.schedule = schedule
        self.config = cfg = config or DDMTrainConfig()
        self.data = torch.as_tensor(np.asarray(patches, dtype=np.float32))
        if self.data.shape[0] == 0:
            raise ValueError("no training patches")
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.step = 0
        self.losses: list[float] = []

    def _lr(self) -> float:
        cfg = self.config
        return cfg.lr * min(1.0, (self.step + 1) / max(cfg.warmup, 1))

    def train(self, steps: int | None = None, callback=None) -> list[float]:
        cfg = self.config
        steps = cfg.steps if steps is None else steps
        self.model.train()
        for _ in range(steps):
            idx = torch.randint(0, self.data.shape[0], (cfg.batch_size,), generator=self.generator)
            loss = ddm_training_loss(self.model, self.data[idx], self.schedule, self.generator, cfg.objective)
            self.optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
            for group in self.optimizer.param_groups:
                group["lr"] = self._lr()
            self.optimizer.step()
            self.step += 1
            self.losses.append(loss.item())
            if cfg.log_every and self.step % cfg.log_every == 0:
                log.info("ddm step %d loss %.5f", self.step, np.mean(self.losses[-cfg.log_every:]))
            if callback is not None:
                callback(self.step, self.losses[-1])
        self.model.eval()
        return self.losses

    def optimizer_state(self) -> dict:
        return {"optimizer": self.optimizer.state_dict(), "generator": self.generator.get_state(),
                "step": self.step, "losses": self.losses}

    def load_optimizer_state(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["generator"])
        self.step = state["step"]
        self.losses = list(state["losses"])


def save_ddm(path, model: Denoiser, schedule: NoiseSchedule, patch_size: int, scene_scale: float = 1.0,
             step: int = 0) -> None:
    cfg = asdict(model.config)
    cfg["widths"] = list(cfg["widths"])
    meta = {"version": CHECKPOINT_VERSION, "network": cfg, "patch_size": patch_size,
            "scene_scale": scene_scale, "step": step, "T": schedule.T}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), __beta__=schedule.beta[1:], **arrays)


def load_ddm(path):
    """Returns ``(model, schedule, meta)``."""
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise ValueError(f"{path}: missing checkpoint metadata")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a {CHECKPOINT_VERSION} checkpoint")
        net = dict(meta["network"])
        net["widths"] = tuple(net["widths"])
        model = Denoiser(DenoiserConfig(**net))
        model.load_state_dict({k: torch.from_numpy(archive[k]) for k in archive.files
                               if k not in ("__meta__", "__beta__")})
        schedule = NoiseSchedule(archive["__beta__"])
    model.eval()
    return model, schedule, meta
