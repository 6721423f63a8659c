from .diffusion import (
    ancestral_sample,
    ddm_training_loss,
    gaussian_optimal_eps,
    gaussian_score,
    loss_weight,
    normalize_blocks,
    posterior_mean,
    q_sample,
    score_gradient,
    tau_discretize,
)
from .network import Denoiser, DenoiserConfig
from .patch import decode_depth, decode_rgbd, encode_depth, encode_rgbd
from .schedule import NoiseSchedule
from .training import DDMTrainConfig, DDMTrainer, load_ddm, save_ddm

__all__ = [
    "DDMTrainConfig", "DDMTrainer", "Denoiser", "DenoiserConfig", "NoiseSchedule",
    "ancestral_sample", "ddm_training_loss", "decode_depth", "decode_rgbd", "encode_depth", "encode_rgbd",
    "gaussian_optimal_eps", "gaussian_score", "load_ddm", "loss_weight", "normalize_blocks",
    "posterior_mean", "q_sample", "save_ddm", "score_gradient", "tau_discretize",
]
