from .autograd import NonFiniteGradient
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .loss import NotPositiveDefinite, compose_covariance, kl_divergence
from .model import EmptyCloud, ModelConfig, PointNetKL
from .optim import AmsGradState, amsgrad_step
from .train import TrainConfig, TrainConfigError, TrainResult, mean_kl

__all__ = [
    "AmsGradState", "CheckpointError", "EmptyCloud", "ModelConfig", "NonFiniteGradient",
    "NotPositiveDefinite", "PointNetKL", "TrainConfig", "TrainConfigError", "TrainResult",
    "amsgrad_step", "compose_covariance", "kl_divergence", "load_checkpoint", "mean_kl",
    "save_checkpoint",
]
